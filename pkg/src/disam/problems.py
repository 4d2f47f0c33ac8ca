"""Multi-domain test problems with analytic loss-and-gradient evaluation.

Two problem families live here. QuadraticDomains is a closed-form bundle of
per-domain quadratic bowls, useful as an exact oracle. SoftmaxMLP is a
one-hidden-layer tanh network with softmax cross-entropy, evaluated on
mini-batches drawn from a DomainDataset; its gradient is computed by hand
so it can be checked against finite differences.

A batch is a mapping from domain id to an (X, y) pair. Domains mapped to
empty arrays are simply absent from the resulting report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .objective import DomainLossReport
from .param_math import DimensionError, as_params
from .rng import STREAM_DATASET, philox

# Geometry constants for the synthetic cluster generator. Class centroids sit
# on a circle of this radius in the first two feature dimensions; the noise
# level of domain 0 is NOISE_BASE. Domain i's centroid layout is rotated by
# ROTATION_RATE * i * shift_scale radians and translated by
# DRIFT_RATE * i * shift_scale along a fixed diagonal.
CLUSTER_RADIUS = 2.0
NOISE_BASE = 0.55
ROTATION_RATE = 1.0
DRIFT_RATE = 1.0


@dataclass(frozen=True)
class DomainDataset:
    """Per-domain classification samples with contiguous domain ids 0..M-1.

    features[i] is an (n_i, d_in) float64 array, labels[i] an (n_i,) integer
    array with values in [0, n_classes).
    """

    features: tuple[np.ndarray, ...]
    labels: tuple[np.ndarray, ...]
    n_classes: int

    def __post_init__(self):
        if len(self.features) < 2:
            raise ValueError("need at least two domains")
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels must have one entry per domain")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        d = self.features[0].shape[1]
        for i, (X, y) in enumerate(zip(self.features, self.labels)):
            if X.ndim != 2 or X.shape[1] != d:
                raise ValueError(f"domain {i}: features must be (n_i, {d})")
            if y.shape != (X.shape[0],):
                raise ValueError(f"domain {i}: labels must match sample count")
            if X.shape[0] < 1:
                raise ValueError(f"domain {i}: empty domain")
            if y.min() < 0 or y.max() >= self.n_classes:
                raise ValueError(f"domain {i}: labels outside [0, {self.n_classes})")

    @property
    def num_domains(self) -> int:
        return len(self.features)

    @property
    def d_in(self) -> int:
        return self.features[0].shape[1]

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(X.shape[0] for X in self.features)

    @property
    def alphas(self) -> np.ndarray:
        c = np.array(self.counts, dtype=np.float64)
        return c / c.sum()

    def full_batch(self, domain_ids=None) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """Batch containing every sample of the selected domains."""
        if domain_ids is None:
            domain_ids = range(self.num_domains)
        return {d: (self.features[d], self.labels[d]) for d in domain_ids}

    def take(self, domain_id: int, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.features[domain_id][idx], self.labels[domain_id][idx]


class Problem:
    """Anything that maps (parameters, batch) to a DomainLossReport."""

    @property
    def param_dim(self) -> int:
        raise NotImplementedError

    def eval(self, w: np.ndarray, batch=None) -> DomainLossReport:
        raise NotImplementedError


@dataclass(frozen=True)
class QuadraticDomains(Problem):
    """Per-domain quadratic bowls L_i(w) = 0.5 (w-c_i)' A_i (w-c_i) + b_i.

    Each curvature matrix must be symmetric positive definite. Evaluation is
    exact; there is no sampling, so the batch argument may select a subset
    of domain ids but carries no data.
    """

    centers: np.ndarray     # (M, k)
    curvatures: np.ndarray  # (M, k, k)
    offsets: np.ndarray     # (M,)
    weights: np.ndarray = field(default=None)  # (M,), defaults to uniform

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        A = np.asarray(self.curvatures, dtype=np.float64)
        b = np.asarray(self.offsets, dtype=np.float64)
        if c.ndim != 2:
            raise ValueError("centers must be (M, k)")
        m, k = c.shape
        if A.shape != (m, k, k):
            raise ValueError("curvatures must be (M, k, k)")
        if b.shape != (m,):
            raise ValueError("offsets must be (M,)")
        if np.any(b < 0):
            raise ValueError("offsets must be nonnegative")
        for i in range(m):
            if not np.allclose(A[i], A[i].T, rtol=1e-12, atol=1e-12):
                raise ValueError(f"curvature {i} is not symmetric")
            if np.linalg.eigvalsh(A[i]).min() <= 0:
                raise ValueError(f"curvature {i} is not positive definite")
        w = self.weights
        if w is None:
            w = np.full(m, 1.0 / m)
        else:
            w = np.asarray(w, dtype=np.float64)
            if w.shape != (m,) or np.any(w < 0) or w.sum() <= 0:
                raise ValueError("weights must be nonnegative with positive sum")
            w = w / w.sum()
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "curvatures", A)
        object.__setattr__(self, "offsets", b)
        object.__setattr__(self, "weights", w)

    @property
    def num_domains(self) -> int:
        return self.centers.shape[0]

    @property
    def param_dim(self) -> int:
        return self.centers.shape[1]

    def eval(self, w: np.ndarray, batch=None) -> DomainLossReport:
        w = as_params(w)
        if w.shape[0] != self.param_dim:
            raise DimensionError(
                f"expected {self.param_dim} parameters, got {w.shape[0]}"
            )
        if batch is None:
            ids = tuple(range(self.num_domains))
        else:
            ids = tuple(sorted(batch))
        losses = np.empty(len(ids))
        grads = np.empty((len(ids), self.param_dim))
        for j, i in enumerate(ids):
            d = w - self.centers[i]
            g = self.curvatures[i] @ d
            losses[j] = 0.5 * float(d @ g) + self.offsets[i]
            grads[j] = g
        alphas = self.weights[list(ids)]
        alphas = alphas / alphas.sum()
        total = float((alphas * losses).sum())
        return DomainLossReport(
            domain_ids=ids, losses=losses, weights=alphas, grads=grads, total=total
        )


def eval_quadratic(q: QuadraticDomains, w: np.ndarray) -> DomainLossReport:
    """Closed-form losses and gradients of every quadratic domain at w."""
    return q.eval(w)


def random_quadratic_domains(
    seed: int,
    num_domains: int = 2,
    dim: int = 2,
    eig_range: tuple[float, float] = (0.5, 3.0),
    center_scale: float = 1.0,
) -> QuadraticDomains:
    """Random SPD quadratic bundle: eigenvalues in eig_range, Haar-ish basis."""
    rng = philox(seed, STREAM_DATASET)
    centers = center_scale * rng.standard_normal((num_domains, dim))
    curvs = np.empty((num_domains, dim, dim))
    lo, hi = eig_range
    for i in range(num_domains):
        Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        eigs = rng.uniform(lo, hi, size=dim)
        S = (Q * eigs) @ Q.T
        curvs[i] = 0.5 * (S + S.T)
    offsets = rng.uniform(0.0, 0.5, size=num_domains)
    return QuadraticDomains(centers=centers, curvatures=curvs, offsets=offsets)


@dataclass(frozen=True)
class SoftmaxMLP(Problem):
    """One hidden tanh layer into softmax cross-entropy over n_classes.

    Parameters are a single flat vector: W1 (d_in, hidden), b1 (hidden,),
    W2 (hidden, n_classes), b2 (n_classes,), concatenated in that order.
    """

    d_in: int
    hidden: int
    n_classes: int

    def __post_init__(self):
        if self.d_in < 1 or self.hidden < 1 or self.n_classes < 2:
            raise ValueError("d_in, hidden must be >= 1 and n_classes >= 2")

    @property
    def param_dim(self) -> int:
        return (self.d_in + 1) * self.hidden + (self.hidden + 1) * self.n_classes

    def unpack(self, w: np.ndarray):
        d, h, c = self.d_in, self.hidden, self.n_classes
        w = as_params(w)
        if w.shape[0] != self.param_dim:
            raise DimensionError(f"expected {self.param_dim} parameters, got {w.shape[0]}")
        i = 0
        W1 = w[i : i + d * h].reshape(d, h); i += d * h
        b1 = w[i : i + h]; i += h
        W2 = w[i : i + h * c].reshape(h, c); i += h * c
        b2 = w[i : i + c]
        return W1, b1, W2, b2

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Scaled-normal weights, zero biases."""
        d, h, c = self.d_in, self.hidden, self.n_classes
        W1 = rng.standard_normal((d, h)) / np.sqrt(d)
        W2 = rng.standard_normal((h, c)) / np.sqrt(h)
        return np.concatenate([W1.ravel(), np.zeros(h), W2.ravel(), np.zeros(c)])

    def logits(self, w: np.ndarray, X: np.ndarray) -> np.ndarray:
        W1, b1, W2, b2 = self.unpack(w)
        return np.tanh(X @ W1 + b1) @ W2 + b2

    def loss_and_grad(
        self, w: np.ndarray, X: np.ndarray, y: np.ndarray
    ) -> tuple[float, np.ndarray]:
        """Mean cross-entropy over (X, y) and its gradient in w."""
        W1, b1, W2, b2 = self.unpack(w)
        n = X.shape[0]
        A1 = np.tanh(X @ W1 + b1)
        logits = A1 @ W2 + b2
        # log-softmax with the usual max shift for stability
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1))
        log_p = shifted - log_z[:, None]
        loss = float(-log_p[np.arange(n), y].mean())

        P = np.exp(log_p)
        P[np.arange(n), y] -= 1.0
        dZ2 = P / n
        gW2 = A1.T @ dZ2
        gb2 = dZ2.sum(axis=0)
        dA1 = dZ2 @ W2.T
        dZ1 = dA1 * (1.0 - A1 * A1)
        gW1 = X.T @ dZ1
        gb1 = dZ1.sum(axis=0)
        grad = np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])
        return loss, grad

    def eval(self, w: np.ndarray, batch=None) -> DomainLossReport:
        if not batch:
            raise ValueError("batch must contain at least one nonempty domain")
        ids = []
        counts = []
        losses = []
        grads = []
        for d in sorted(batch):
            X, y = batch[d]
            if X.shape[0] == 0:
                continue
            loss, grad = self.loss_and_grad(w, X, y)
            ids.append(int(d))
            counts.append(X.shape[0])
            losses.append(loss)
            grads.append(grad)
        if not ids:
            raise ValueError("batch must contain at least one nonempty domain")
        counts = np.array(counts, dtype=np.float64)
        weights = counts / counts.sum()
        losses = np.array(losses)
        grads = np.vstack(grads)
        total = float((weights * losses).sum())
        return DomainLossReport(
            domain_ids=tuple(ids),
            losses=losses,
            weights=weights,
            grads=grads,
            total=total,
        )


def eval_mlp(m: SoftmaxMLP, w: np.ndarray, batch) -> DomainLossReport:
    """Per-domain mean cross-entropy and analytic gradient on one batch."""
    return m.eval(w, batch)


def generate_shifted_clusters(
    seed: int,
    M: int,
    C: int,
    d_in: int,
    per_domain_counts,
    shift_scale: float,
    difficulty_skew: float,
) -> DomainDataset:
    """Gaussian class clusters whose geometry drifts and noise grows with i.

    Domain 0 places class centroids evenly on a circle of radius
    CLUSTER_RADIUS in the first two feature dimensions. Domain i rotates
    that layout by ROTATION_RATE * i * shift_scale radians and translates
    it by DRIFT_RATE * i * shift_scale along a fixed diagonal direction,
    so later domains are progressively shifted. Within-class noise is
    isotropic with standard deviation NOISE_BASE * difficulty_skew**(i/2),
    making the within-class variance of domain i exactly
    difficulty_skew**i times domain 0's.
    """
    if M < 2:
        raise ValueError("need at least two domains")
    if C < 2:
        raise ValueError("need at least two classes")
    if d_in < 2:
        raise ValueError("need at least two feature dimensions")
    counts = tuple(int(n) for n in per_domain_counts)
    if len(counts) != M:
        raise ValueError(f"expected {M} per-domain counts, got {len(counts)}")
    if any(n < C for n in counts):
        raise ValueError("every domain needs at least one sample per class")
    if shift_scale < 0:
        raise ValueError("shift_scale must be nonnegative")
    if difficulty_skew < 1:
        raise ValueError("difficulty_skew must be at least 1")

    rng = philox(seed, STREAM_DATASET)
    base_angles = 2.0 * np.pi * np.arange(C) / C
    drift = np.array([np.cos(np.pi / 4), np.sin(np.pi / 4)])

    features = []
    labels = []
    for i in range(M):
        theta = base_angles + ROTATION_RATE * i * shift_scale
        centroids = np.zeros((C, d_in))
        centroids[:, 0] = CLUSTER_RADIUS * np.cos(theta)
        centroids[:, 1] = CLUSTER_RADIUS * np.sin(theta)
        centroids[:, :2] += DRIFT_RATE * i * shift_scale * drift
        sigma = NOISE_BASE * difficulty_skew ** (i / 2.0)

        per_class = [counts[i] // C] * C
        for r in range(counts[i] % C):
            per_class[r] += 1
        X = np.empty((counts[i], d_in))
        y = np.empty(counts[i], dtype=np.int64)
        row = 0
        for c in range(C):
            n_c = per_class[c]
            X[row : row + n_c] = centroids[c] + sigma * rng.standard_normal((n_c, d_in))
            y[row : row + n_c] = c
            row += n_c
        features.append(X)
        labels.append(y)

    return DomainDataset(
        features=tuple(features), labels=tuple(labels), n_classes=C
    )


def save_dataset(dataset: DomainDataset, path) -> None:
    """Write one sample per line: domain id, label, then the features.

    Floats are written with repr so a round trip through load_dataset is
    bit-exact. Two comment lines record the column layout and class count.
    """
    d = dataset.d_in
    cols = ",".join(["domain", "label"] + [f"x{j}" for j in range(d)])
    lines = [f"# columns: {cols}", f"# n_classes: {dataset.n_classes}"]
    for i in range(dataset.num_domains):
        X, y = dataset.features[i], dataset.labels[i]
        for r in range(X.shape[0]):
            feats = ",".join(repr(float(v)) for v in X[r])
            lines.append(f"{i},{y[r]},{feats}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> DomainDataset:
    """Inverse of save_dataset."""
    n_classes = None
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "n_classes:" in line:
                    n_classes = int(line.split("n_classes:")[1])
                continue
            parts = line.split(",")
            rows.append((int(parts[0]), int(parts[1]), [float(v) for v in parts[2:]]))
    if n_classes is None:
        raise ValueError(f"{path}: missing n_classes header line")
    if not rows:
        raise ValueError(f"{path}: no samples")
    M = max(r[0] for r in rows) + 1
    features = []
    labels = []
    for i in range(M):
        dom = [r for r in rows if r[0] == i]
        if not dom:
            raise ValueError(f"{path}: domain ids are not contiguous (missing {i})")
        features.append(np.array([r[2] for r in dom], dtype=np.float64))
        labels.append(np.array([r[1] for r in dom], dtype=np.int64))
    return DomainDataset(
        features=tuple(features), labels=tuple(labels), n_classes=n_classes
    )
