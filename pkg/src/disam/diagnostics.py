"""Measurement: sharpness estimators, curve normalization, held-out
evaluation, and the trace container that training runs produce.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .param_math import DELTA_NORM, l2_norm


@dataclass(frozen=True)
class EpochSummary:
    """End-of-epoch snapshot: full-train per-domain losses, held-out
    metrics, and the two sharpness estimates."""

    epoch: int
    t_end: int
    domain_losses: np.ndarray
    heldout_loss: float | None
    heldout_accuracy: float | None
    sharp_ascent: float
    sharp_ascent_degenerate: bool
    sharp_gradvar: float


@dataclass
class TrainingTrace:
    """Ordered step records plus epoch summaries and run metadata."""

    steps: list
    epochs: list
    metadata: dict = field(default_factory=dict)
    diverged: bool = False

    def __post_init__(self):
        ts = [r.t for r in self.steps]
        for a, b in zip(ts, ts[1:]):
            if b != a + 1:
                raise ValueError(f"step counter jumps from {a} to {b}")
        ends = [e.t_end for e in self.epochs]
        for a, b in zip(ends, ends[1:]):
            if b <= a:
                raise ValueError("epoch ranges must be disjoint and increasing")
        if ts and ends and ends[-1] > ts[-1]:
            raise ValueError("epoch summary beyond the last recorded step")

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    def phi_values(self) -> np.ndarray:
        return np.array([r.phi for r in self.steps if r.phi is not None])

    def median_phi(self, last_n: int | None = None) -> float:
        """Median angle between successive perturbations, optionally over
        the records with t in the final last_n steps."""
        if last_n is None:
            vals = [r.phi for r in self.steps if r.phi is not None]
        else:
            cut = self.steps[-1].t - last_n
            vals = [r.phi for r in self.steps if r.phi is not None and r.t > cut]
        if not vals:
            return float("nan")
        return float(np.median(vals))

    def final_epoch(self) -> EpochSummary:
        if not self.epochs:
            raise ValueError("trace has no epoch summaries")
        return self.epochs[-1]


def _scalar_repr(x) -> str:
    return "" if x is None else repr(float(x))


def traces_mismatch(a: TrainingTrace, b: TrainingTrace) -> str | None:
    """First bitwise difference between two traces' step streams, or None.

    Floats are compared through their repr, matching what the CSV writer
    emits, and arrays bytewise; a pass here means the serialized traces
    are identical too.
    """
    if a.num_steps != b.num_steps:
        return f"step counts differ: {a.num_steps} vs {b.num_steps}"
    if a.diverged != b.diverged:
        return "divergence flags differ"
    for ra, rb in zip(a.steps, b.steps):
        if ra.t != rb.t or ra.domain_ids != rb.domain_ids:
            return f"t={ra.t}: structure differs"
        for name in ("eta", "total_loss", "variance", "grad_norm", "di_grad_norm", "phi"):
            va, vb = getattr(ra, name), getattr(rb, name)
            if _scalar_repr(va) != _scalar_repr(vb):
                return f"t={ra.t}: {name} {va!r} vs {vb!r}"
        for name in ("losses", "betas"):
            if getattr(ra, name).tobytes() != getattr(rb, name).tobytes():
                return f"t={ra.t}: {name} arrays differ"
        ea, eb = ra.eps, rb.eps
        if (ea is None) != (eb is None):
            return f"t={ra.t}: one eps missing"
        if ea is not None and ea.tobytes() != eb.tobytes():
            return f"t={ra.t}: eps arrays differ"
        if ra.degenerate != rb.degenerate:
            return f"t={ra.t}: degenerate flags differ"
    return None


def estimate_sharpness_ascent(problem, w, batch, rho: float) -> tuple[float, bool]:
    """One-ascent-step loss increase: L(w + rho*g/|g|) - L(w) on the batch.

    Returns (value, degenerate). A gradient with norm at or below the
    degeneracy threshold gives (0.0, True): there is no ascent direction
    to follow.
    """
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    report = problem.eval(w, batch)
    g = report.total_gradient()
    n = l2_norm(g)
    if n <= DELTA_NORM:
        return 0.0, True
    ascent = problem.eval(w + (rho / n) * g, batch)
    return ascent.total - report.total, False


def estimate_sharpness_gradvar(problem, w, batches) -> float:
    """Mean squared deviation of per-batch total gradients from their mean.

    Computes (1/B) sum_b |g_b - g_bar|^2 over the given batches at fixed
    parameters. Invariant to batch order and to adding a common vector to
    every gradient.
    """
    batches = list(batches)
    if len(batches) < 2:
        raise ValueError("need at least two batches")
    grads = np.vstack([problem.eval(w, b).total_gradient() for b in batches])
    dev = grads - grads.mean(axis=0)
    return float((dev * dev).sum(axis=1).mean())


def normalize_convergence(series) -> tuple[np.ndarray, bool]:
    """Map a loss series to [0, 1] by subtracting its min and dividing by
    the shifted max.

    Returns (normalized, degenerate). A constant series has no span; it
    comes back as zeros with the flag set.
    """
    arr = np.asarray(series, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty series")
    lo = arr.min()
    span = arr.max() - lo
    if span == 0.0:
        return np.zeros_like(arr), True
    return (arr - lo) / span, False


def heldout_domain_eval(problem, w, X: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Mean cross-entropy and argmax accuracy on held-out samples.

    The problem must be a classifier exposing loss_and_grad and logits
    (the quadratic bundles have no notion of held-out data).
    """
    if X.shape[0] == 0:
        raise ValueError("held-out evaluation needs at least one sample")
    if not hasattr(problem, "logits"):
        raise ValueError("held-out evaluation requires a classification problem")
    loss, _ = problem.loss_and_grad(w, X, y)
    pred = problem.logits(w, X).argmax(axis=1)
    accuracy = float((pred == y).mean())
    return float(loss), accuracy
