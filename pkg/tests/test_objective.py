"""Domain objective tests: weights, variance, and their gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disam.objective import (
    ConvergenceTracker,
    DomainLossReport,
    PerturbationSpec,
    disam_perturbation_gradient,
    domain_inspired_loss_gradient,
    domain_variance,
    intuitive_weights,
    perturbation_weights,
    variance_gradient,
    vrex_loss_and_gradient,
    weighted_gradient_sum,
)


def make_report(losses, weights=None, grads=None, seed=0):
    losses = np.asarray(losses, dtype=np.float64)
    m = losses.size
    if weights is None:
        weights = np.full(m, 1.0 / m)
    else:
        weights = np.asarray(weights, dtype=np.float64)
    if grads is None:
        grads = np.random.default_rng(seed).normal(size=(m, 6))
    total = float(np.dot(weights, losses))
    return DomainLossReport(
        domain_ids=tuple(range(m)),
        losses=losses,
        weights=weights,
        grads=grads,
        total=total,
    )


loss_sets = st.lists(
    st.floats(0.0, 50.0, allow_nan=False, allow_infinity=False),
    min_size=2,
    max_size=10,
)


# ---------------------------------------------------------------------------
# report basics

def test_report_rejects_ragged_shapes():
    with pytest.raises(ValueError):
        DomainLossReport(
            domain_ids=(0, 1),
            losses=np.zeros(3),
            weights=np.zeros(2),
            grads=np.zeros((2, 4)),
            total=0.0,
        )


def test_total_gradient_is_weighted_sum():
    rep = make_report([1.0, 2.0, 3.0], weights=[0.5, 0.3, 0.2])
    expect = 0.5 * rep.grads[0] + 0.3 * rep.grads[1] + 0.2 * rep.grads[2]
    np.testing.assert_allclose(rep.total_gradient(), expect, rtol=0, atol=1e-15)


def test_is_finite_detects_nan_gradient():
    rep = make_report([1.0, 2.0])
    rep.grads[1, 0] = np.nan
    assert not rep.is_finite()


def test_perturbation_spec_validation():
    with pytest.raises(ValueError):
        PerturbationSpec(rho=0.0)
    with pytest.raises(ValueError):
        PerturbationSpec(rho=0.1, lam=-0.5)
    with pytest.raises(ValueError):
        PerturbationSpec(rho=0.1, mode="momentum")


def test_effective_lambda_zero_outside_disam_mode():
    assert PerturbationSpec(rho=0.1, lam=0.3, mode="sam").effective_lambda == 0.0
    assert PerturbationSpec(rho=0.1, lam=0.3, mode="disam").effective_lambda == 0.3


# ---------------------------------------------------------------------------
# variance

def test_variance_hand_value():
    # mean 2, deviations (-1, 0, 1): population variance 2/3
    assert domain_variance([1.0, 2.0, 3.0]) == pytest.approx(2.0 / 3.0, abs=1e-15)


@settings(deadline=None)
@given(loss_sets)
def test_variance_double_sum_equals_population_variance(losses):
    arr = np.asarray(losses)
    assert domain_variance(arr) == pytest.approx(float(np.var(arr)), abs=1e-10)


def test_variance_gradient_matches_finite_differences():
    """Perturb each loss entry and difference the scalar variance."""
    rng = np.random.default_rng(3)
    losses = rng.uniform(0.5, 3.0, size=4)
    grads = np.eye(4)  # dL_i/dw_j = delta_ij makes the chain rule transparent
    rep = make_report(losses, grads=grads)
    g = variance_gradient(rep)
    h = 1e-6
    for j in range(4):
        bumped_up = losses.copy()
        bumped_up[j] += h
        bumped_dn = losses.copy()
        bumped_dn[j] -= h
        fd = (domain_variance(bumped_up) - domain_variance(bumped_dn)) / (2 * h)
        assert g[j] == pytest.approx(fd, rel=1e-7, abs=1e-9)


# ---------------------------------------------------------------------------
# perturbation weights

def test_worked_two_domain_weights_exact():
    rep = make_report([2.0, 1.0], weights=[0.5, 0.5])
    betas = perturbation_weights(rep, lam=0.1)
    assert betas[0] == 0.45
    assert betas[1] == 0.55


def test_weights_unchanged_at_lambda_zero():
    rep = make_report([2.0, 1.0, 4.0], weights=[0.2, 0.5, 0.3])
    np.testing.assert_array_equal(perturbation_weights(rep, 0.0), rep.weights)


@settings(deadline=None)
@given(loss_sets, st.floats(0.0, 5.0, allow_nan=False))
def test_weight_sum_is_conserved(losses, lam):
    rep = make_report(losses, grads=np.zeros((len(losses), 1)))
    betas = perturbation_weights(rep, lam)
    assert betas.sum() == pytest.approx(1.0, abs=1e-12)


@settings(deadline=None)
@given(loss_sets, st.floats(0.01, 5.0, allow_nan=False))
def test_weights_anti_monotone_in_loss(losses, lam):
    """Higher-loss domains never receive more perturbation weight."""
    rep = make_report(losses, grads=np.zeros((len(losses), 1)))
    betas = perturbation_weights(rep, lam)
    order = np.argsort(rep.losses)
    reordered = betas[order]
    assert np.all(np.diff(reordered) <= 1e-12)


def test_raising_a_loss_lowers_its_weight():
    base = make_report([1.0, 1.0, 1.0])
    bumped = make_report([1.0, 1.0, 2.0])
    b0 = perturbation_weights(base, 0.1)
    b1 = perturbation_weights(bumped, 0.1)
    assert b1[2] < b0[2]
    assert b1[0] > b0[0]


def test_weights_can_go_negative_without_clamping():
    rep = make_report([10.0, 0.0], weights=[0.5, 0.5])
    betas = perturbation_weights(rep, lam=0.5)
    assert betas[0] < 0
    assert betas.sum() == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# gradient routes

@settings(deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 2.0, allow_nan=False))
def test_two_gradient_routes_agree(seed, lam):
    """Weighted-sum route and total-minus-variance route are one identity."""
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 6))
    rep = make_report(
        rng.uniform(0.0, 4.0, size=m),
        weights=None,
        grads=rng.normal(size=(m, 9)),
    )
    a = disam_perturbation_gradient(rep, lam)
    b = domain_inspired_loss_gradient(rep, lam)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_weighted_gradient_sum_hand_value():
    grads = np.array([[1.0, 0.0], [0.0, 2.0]])
    out = weighted_gradient_sum(np.array([0.25, 0.75]), grads)
    np.testing.assert_array_equal(out, np.array([0.25, 1.5]))


# ---------------------------------------------------------------------------
# convergence tracker and intuitive weights

def test_tracker_keeps_running_minimum():
    tr = ConvergenceTracker()
    tr.observe((0, 1), [2.0, 3.0])
    tr.observe((0, 1), [1.5, 3.5])
    assert tr.minima == {0: 1.5, 1: 3.0}
    gaps = tr.gaps((0, 1), [2.0, 3.5])
    np.testing.assert_allclose(gaps, [0.5, 0.5])


def test_intuitive_weights_reduce_to_batch_weights():
    tr = ConvergenceTracker()
    rep = make_report([1.0, 2.0], weights=[0.4, 0.6])
    tr.observe(rep.domain_ids, rep.losses)
    # all gaps zero right after observing the same losses
    w = intuitive_weights(tr, rep, beta=1.0)
    np.testing.assert_array_equal(w, rep.weights)
    w0 = intuitive_weights(tr, rep, beta=0.0)
    np.testing.assert_array_equal(w0, rep.weights)


def test_intuitive_weights_favor_less_converged_domain():
    tr = ConvergenceTracker()
    tr.observe((0, 1), [1.0, 1.0])
    rep = make_report([1.0, 2.0], weights=[0.5, 0.5])
    w = intuitive_weights(tr, rep, beta=1.0)
    assert w[1] > w[0]
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(w >= 0)


def test_intuitive_weights_reject_negative_beta():
    tr = ConvergenceTracker()
    rep = make_report([1.0, 2.0])
    tr.observe(rep.domain_ids, rep.losses)
    with pytest.raises(ValueError):
        intuitive_weights(tr, rep, beta=-1.0)


# ---------------------------------------------------------------------------
# V-REx objective

def test_vrex_reduces_to_erm_at_beta_zero():
    rep = make_report([1.0, 3.0], weights=[0.5, 0.5])
    loss, grad = vrex_loss_and_gradient(rep, 0.0)
    assert loss == rep.total
    np.testing.assert_array_equal(grad, rep.total_gradient())


def test_vrex_adds_variance_penalty():
    rep = make_report([1.0, 3.0], weights=[0.5, 0.5])
    loss, grad = vrex_loss_and_gradient(rep, 2.0)
    assert loss == pytest.approx(rep.total + 2.0 * domain_variance(rep.losses))
    expect = rep.total_gradient() + 2.0 * variance_gradient(rep)
    np.testing.assert_allclose(grad, expect, rtol=0, atol=1e-15)


def test_vrex_rejects_negative_beta():
    rep = make_report([1.0, 2.0])
    with pytest.raises(ValueError):
        vrex_loss_and_gradient(rep, -0.1)
