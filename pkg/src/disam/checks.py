"""Built-in oracle suite behind the `check` CLI subcommand.

Each check recomputes a hand-derivable quantity through an independent
route (closed form, finite differences, brute force) and compares. They
are fast versions of the property tests; a clean `disam check` is a quick
smoke signal that an installation computes what it should.
"""

from __future__ import annotations

import math

import numpy as np

from .config import default_toy_config, with_optimizer
from .diagnostics import (
    estimate_sharpness_ascent,
    estimate_sharpness_gradvar,
    normalize_convergence,
    traces_mismatch,
)
from .harness import run_seed
from .objective import (
    DomainLossReport,
    disam_perturbation_gradient,
    domain_inspired_loss_gradient,
    domain_variance,
    perturbation_weights,
)
from .optimizers import phi_between
from .problems import QuadraticDomains, SoftmaxMLP, random_quadratic_domains
from .rng import philox


def _random_report(rng, m=4, k=7) -> DomainLossReport:
    losses = rng.uniform(0.1, 3.0, size=m)
    counts = rng.integers(1, 20, size=m).astype(np.float64)
    weights = counts / counts.sum()
    grads = rng.standard_normal((m, k))
    return DomainLossReport(
        domain_ids=tuple(range(m)),
        losses=losses,
        weights=weights,
        grads=grads,
        total=float((weights * losses).sum()),
    )


def check_quadratic_hand_values():
    q = QuadraticDomains(
        centers=np.array([[1.0], [-1.0]]),
        curvatures=np.array([[[1.0]], [[1.0]]]),
        offsets=np.array([0.0, 0.0]),
    )
    r = q.eval(np.array([0.0]))
    ok = (
        np.allclose(r.losses, [0.5, 0.5], atol=0)
        and np.allclose(r.grads[:, 0], [-1.0, 1.0], atol=0)
    )
    return ok, f"losses={r.losses}, grads={r.grads.ravel()}"


def check_mlp_finite_differences():
    model = SoftmaxMLP(d_in=3, hidden=5, n_classes=3)
    rng = philox(11)
    worst = 0.0
    for _ in range(3):
        w = rng.standard_normal(model.param_dim)
        X = rng.standard_normal((12, 3))
        y = rng.integers(0, 3, size=12)
        _, g = model.loss_and_grad(w, X, y)
        h = 1e-5
        for j in rng.choice(model.param_dim, size=10, replace=False):
            e = np.zeros(model.param_dim)
            e[j] = h
            lp, _ = model.loss_and_grad(w + e, X, y)
            lm, _ = model.loss_and_grad(w - e, X, y)
            fd = (lp - lm) / (2 * h)
            rel = abs(fd - g[j]) / max(abs(fd), abs(g[j]), 1e-12)
            worst = max(worst, rel)
    return worst < 1e-6, f"max relative error {worst:.2e}"


def check_mlp_uniform_softmax():
    model = SoftmaxMLP(d_in=2, hidden=4, n_classes=3)
    rng = philox(5)
    X = rng.standard_normal((9, 2))
    y = np.array([0, 1, 2] * 3)
    loss, _ = model.loss_and_grad(np.zeros(model.param_dim), X, y)
    err = abs(loss - math.log(3))
    return err < 1e-12, f"|loss - ln 3| = {err:.2e}"


def check_variance_double_sum():
    rng = philox(23)
    worst = 0.0
    for _ in range(100):
        m = int(rng.integers(2, 11))
        losses = rng.uniform(-2, 5, size=m)
        worst = max(worst, abs(domain_variance(losses) - losses.var()))
    return worst < 1e-12, f"max |double-sum - moment| = {worst:.2e}"


def check_worked_two_domain_example():
    report = DomainLossReport(
        domain_ids=(0, 1),
        losses=np.array([2.0, 1.0]),
        weights=np.array([0.5, 0.5]),
        grads=np.eye(2),
        total=1.5,
    )
    betas = perturbation_weights(report, 0.1)
    ok = betas[0] == 0.45 and betas[1] == 0.55
    return ok, f"betas={betas}"


def check_weight_sum_conservation():
    rng = philox(31)
    worst = 0.0
    for _ in range(50):
        report = _random_report(rng)
        lam = float(rng.uniform(0, 2))
        worst = max(worst, abs(perturbation_weights(report, lam).sum() - 1.0))
    return worst < 1e-12, f"max |sum beta - 1| = {worst:.2e}"


def check_gradient_route_equivalence():
    rng = philox(37)
    worst = 0.0
    for _ in range(50):
        report = _random_report(rng)
        lam = float(rng.uniform(0, 2))
        a = disam_perturbation_gradient(report, lam)
        b = domain_inspired_loss_gradient(report, lam)
        worst = max(worst, float(np.abs(a - b).max()))
    return worst < 1e-12, f"max route difference = {worst:.2e}"


def check_normalize_convergence():
    out, flag = normalize_convergence([5.0, 3.0, 1.0])
    ok = not flag and np.array_equal(out, [1.0, 0.5, 0.0])
    out2, flag2 = normalize_convergence([2.0, 2.0, 2.0])
    ok = ok and flag2 and np.array_equal(out2, [0.0, 0.0, 0.0])
    return ok, f"(5,3,1) -> {out}, constant flagged={flag2}"


def check_gradvar_hand_value():
    class TwoGrads:
        param_dim = 2

        def eval(self, w, batch):
            g = np.array([[1.0, 0.0]]) if batch == "a" else np.array([[0.0, 1.0]])
            return DomainLossReport(
                domain_ids=(0,),
                losses=np.array([1.0]),
                weights=np.array([1.0]),
                grads=g,
                total=1.0,
            )

    v = estimate_sharpness_gradvar(TwoGrads(), np.zeros(2), ["a", "b"])
    return v == 0.5, f"gradvar = {v}"


def check_ascent_hand_value():
    q = QuadraticDomains(
        centers=np.zeros((2, 1)),
        curvatures=np.ones((2, 1, 1)),
        offsets=np.zeros(2),
    )
    v, deg = estimate_sharpness_ascent(q, np.array([1.0]), None, 0.1)
    err = abs(v - 0.105)
    return not deg and err < 1e-12, f"|estimate - 0.105| = {err:.2e}"


def check_phi_hand_values():
    a = phi_between(np.array([1.0, 0.0]), np.array([1.0, 0.0]))
    b = phi_between(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    c = phi_between(np.array([1.0, 0.0]), np.array([-1.0, 0.0]))
    ok = a == 0.0 and abs(b - math.pi / 2) < 1e-15 and abs(c - math.pi) < 1e-15
    return ok, f"phi = {a}, {b}, {c}"


def check_reduction_identities():
    base = default_toy_config(steps=40, seeds=(0,))
    traces = {}
    for mode in ("sam", "disam", "intuitive", "erm", "vrex"):
        lam = 0.0 if mode == "disam" else base.optimizer.lam
        beta = 0.0
        cfg = with_optimizer(base, mode=mode, lam=lam, beta=beta)
        traces[mode] = run_seed(cfg, 0, epoch_summaries=False)
    m1 = traces_mismatch(traces["sam"], traces["disam"])
    m2 = traces_mismatch(traces["sam"], traces["intuitive"])
    m3 = traces_mismatch(traces["erm"], traces["vrex"])
    ok = m1 is None and m2 is None and m3 is None
    return ok, f"sam/disam: {m1}; sam/intuitive: {m2}; erm/vrex: {m3}"


def check_run_determinism():
    cfg = default_toy_config(steps=30, seeds=(0,))
    a = run_seed(cfg, 0, epoch_summaries=False)
    b = run_seed(cfg, 0, epoch_summaries=False)
    m = traces_mismatch(a, b)
    return m is None, f"mismatch: {m}"


def check_perturbation_radius():
    cfg = with_optimizer(default_toy_config(steps=30, seeds=(0,)), mode="disam")
    trace = run_seed(cfg, 0, epoch_summaries=False)
    rho = cfg.optimizer.rho
    worst = 0.0
    for r in trace.steps:
        if r.eps is not None:
            worst = max(worst, abs(math.sqrt(float(np.dot(r.eps, r.eps))) - rho) / rho)
    return worst < 1e-12, f"max relative radius error = {worst:.2e}"


def check_quadratic_generator_spd():
    q = random_quadratic_domains(3, num_domains=3, dim=4)
    eigs = [float(np.linalg.eigvalsh(A).min()) for A in q.curvatures]
    return min(eigs) > 0, f"min eigenvalue = {min(eigs):.3f}"


ALL_CHECKS = (
    ("quadratic hand values", check_quadratic_hand_values),
    ("mlp gradient vs finite differences", check_mlp_finite_differences),
    ("mlp uniform softmax at zero params", check_mlp_uniform_softmax),
    ("variance double sum vs moment formula", check_variance_double_sum),
    ("two-domain worked weights", check_worked_two_domain_example),
    ("perturbation weight sum", check_weight_sum_conservation),
    ("gradient route equivalence", check_gradient_route_equivalence),
    ("convergence normalization", check_normalize_convergence),
    ("gradient-variance hand value", check_gradvar_hand_value),
    ("ascent sharpness hand value", check_ascent_hand_value),
    ("perturbation angle hand values", check_phi_hand_values),
    ("reduction identities", check_reduction_identities),
    ("seeded run determinism", check_run_determinism),
    ("perturbation radius contract", check_perturbation_radius),
    ("random quadratic generator SPD", check_quadratic_generator_spd),
)


def run_checks(print_fn=print) -> bool:
    all_ok = True
    for name, fn in ALL_CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        all_ok = all_ok and ok
        status = "ok  " if ok else "FAIL"
        print_fn(f"{status} {name} ({detail})")
    return all_ok
