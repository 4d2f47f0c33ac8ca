"""Multi-domain objective pieces.

Given per-domain losses and gradients for one batch, this module computes
the weighted total loss, the variance between domain losses, the
domain-inspired perturbation gradient with its per-domain weights, the
convergence-weighted ("intuitive") variant, and the V-REx penalty used as a
descent-side baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MODE_SAM = "sam"
MODE_DISAM = "disam"
MODE_INTUITIVE = "intuitive"
PERTURBATION_MODES = (MODE_SAM, MODE_DISAM, MODE_INTUITIVE)


@dataclass(frozen=True)
class DomainLossReport:
    """Per-domain losses, weights, and gradients for one batch.

    ``weights`` are the realized within-batch sample fractions; they are
    nonnegative and sum to one over the domains present in the batch.
    ``total`` is the weighted sum of the per-domain losses.
    """

    domain_ids: tuple[int, ...]
    losses: np.ndarray   # (M,)
    weights: np.ndarray  # (M,)
    grads: np.ndarray    # (M, k)
    total: float

    def __post_init__(self):
        m = len(self.domain_ids)
        if not (self.losses.shape == (m,) and self.weights.shape == (m,)):
            raise ValueError("losses/weights length must match domain_ids")
        if self.grads.ndim != 2 or self.grads.shape[0] != m:
            raise ValueError("grads must be (num_domains, param_dim)")

    @property
    def num_domains(self) -> int:
        return len(self.domain_ids)

    @property
    def param_dim(self) -> int:
        return self.grads.shape[1]

    def total_gradient(self) -> np.ndarray:
        """Weighted gradient sum over present domains."""
        return weighted_gradient_sum(self.weights, self.grads)

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.losses)) and np.all(np.isfinite(self.grads))
        )


def weighted_gradient_sum(weights: np.ndarray, grads: np.ndarray) -> np.ndarray:
    # Pairwise numpy summation, no BLAS dispatch: deterministic per platform.
    return (weights[:, None] * grads).sum(axis=0)


@dataclass(frozen=True)
class PerturbationSpec:
    """How the ascent perturbation is generated.

    ``mode`` is one of "sam", "disam", "intuitive". SAM behaves identically
    to DISAM with ``lam`` zero; ``beta_intuitive`` only applies to the
    intuitive mode.
    """

    rho: float
    lam: float = 0.0
    mode: str = MODE_SAM
    beta_intuitive: float = 1.0

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.beta_intuitive < 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta_intuitive}")
        if self.mode not in PERTURBATION_MODES:
            raise ValueError(f"unknown perturbation mode {self.mode!r}")

    @property
    def effective_lambda(self) -> float:
        """Variance weight actually used: zero in SAM mode."""
        return self.lam if self.mode == MODE_DISAM else 0.0


@dataclass
class ConvergenceTracker:
    """Running minimum of each domain's observed loss.

    The gap ``L_i - min_i`` proxies how far domain ``i`` still is from its
    best observed value; larger means less converged.
    """

    minima: dict[int, float] = field(default_factory=dict)

    def observe(self, domain_ids, losses) -> None:
        for d, loss in zip(domain_ids, losses):
            prev = self.minima.get(d)
            loss = float(loss)
            if prev is None or loss < prev:
                self.minima[d] = loss

    def gaps(self, domain_ids, losses) -> np.ndarray:
        """Nonnegative convergence gaps for already-observed domains."""
        out = np.empty(len(domain_ids))
        for j, (d, loss) in enumerate(zip(domain_ids, losses)):
            out[j] = float(loss) - self.minima[d]
        return out


def domain_variance(losses) -> float:
    """Variance between domain losses via the pairwise double sum.

    Computes (1 / 2M^2) * sum_ij (L_i - L_j)^2, which equals the population
    variance of the losses.
    """
    arr = np.asarray(losses, dtype=np.float64)
    m = arr.size
    diff = arr[:, None] - arr[None, :]
    return float((diff * diff).sum() / (2.0 * m * m))


def perturbation_weights(report: DomainLossReport, lam: float) -> np.ndarray:
    """Per-domain perturbation weights beta_i = alpha_i - (2 lam / M) (L_i - mean).

    Above-mean-loss domains get their weight reduced, below-mean domains
    increased; the weights sum to one (mean deviations cancel). With
    ``lam`` zero the batch weights come back unchanged. Weights may go
    negative; no clamping is applied.
    """
    m = report.num_domains
    dev = report.losses - report.losses.mean()
    return report.weights - (2.0 * lam / m) * dev


def disam_perturbation_gradient(report: DomainLossReport, lam: float) -> np.ndarray:
    """Perturbation-direction gradient as the single weighted sum over domains."""
    betas = perturbation_weights(report, lam)
    return weighted_gradient_sum(betas, report.grads)


def variance_gradient(report: DomainLossReport) -> np.ndarray:
    """Gradient of the domain-loss variance: (2/M) sum_i (L_i - mean) grad_i."""
    m = report.num_domains
    dev = report.losses - report.losses.mean()
    return weighted_gradient_sum((2.0 / m) * dev, report.grads)


def domain_inspired_loss_gradient(report: DomainLossReport, lam: float) -> np.ndarray:
    """Total-loss gradient minus ``lam`` times the variance gradient.

    Algebraically identical to :func:`disam_perturbation_gradient`; kept as
    a separate computational route so the two can be checked against each
    other.
    """
    return report.total_gradient() - lam * variance_gradient(report)


def intuitive_weights(
    tracker: ConvergenceTracker, report: DomainLossReport, beta: float
) -> np.ndarray:
    """Convergence-weighted perturbation weights.

    Returns (alpha_i + beta * gap_i) / sum_j (alpha_j + beta * gap_j) with
    gaps taken from the tracker's running minima. When ``beta`` is zero or
    every gap is zero the expression reduces exactly to the batch weights,
    and they are returned unchanged to keep the reduction bit-exact.
    """
    if beta < 0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    gaps = tracker.gaps(report.domain_ids, report.losses)
    if beta == 0.0 or not np.any(gaps):
        return report.weights.copy()
    u = report.weights + beta * gaps
    return u / u.sum()


def vrex_loss_and_gradient(
    report: DomainLossReport, beta: float
) -> tuple[float, np.ndarray]:
    """V-REx objective: total loss plus ``beta`` times the domain-loss variance.

    The variance penalty is *added* here and acts on the descent objective,
    unlike the perturbation-side subtraction in the domain-inspired mode.
    With ``beta`` zero this reduces exactly to the plain total and its
    gradient.
    """
    if beta < 0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    loss = report.total + beta * domain_variance(report.losses)
    if beta == 0.0:
        return loss, report.total_gradient()
    return loss, report.total_gradient() + beta * variance_gradient(report)
