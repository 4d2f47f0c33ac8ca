"""Optimizer step tests: update rules, reductions, and edge handling."""

import math

import numpy as np
import pytest

from disam.objective import MODE_DISAM, MODE_INTUITIVE, MODE_SAM, PerturbationSpec
from disam.optimizers import (
    SCHEDULE_CONSTANT,
    SCHEDULE_INV_SQRT,
    DivergenceError,
    OptimizerState,
    StepRecord,
    make_step_fn,
    phi_between,
    step_disam,
    step_erm,
    step_intuitive,
    step_sam,
    step_vrex,
)
from disam.problems import QuadraticDomains, random_quadratic_domains


def quad_problem(seed=0, num_domains=3, dim=4):
    return random_quadratic_domains(seed=seed, num_domains=num_domains, dim=dim)


def fresh_state(w, mode=None, rho=0.05, lam=0.1, beta=1.0, eta0=0.1,
                schedule=SCHEDULE_CONSTANT):
    spec = None
    if mode is not None:
        spec = PerturbationSpec(rho=rho, lam=lam, mode=mode, beta_intuitive=beta)
    return OptimizerState(w=np.array(w, dtype=np.float64), eta0=eta0,
                          schedule=schedule, spec=spec)


# ---------------------------------------------------------------------------
# state and schedule

def test_state_validation():
    with pytest.raises(ValueError):
        OptimizerState(w=np.zeros(2), eta0=0.0)
    with pytest.raises(ValueError):
        OptimizerState(w=np.zeros(2), eta0=0.1, schedule="cosine")
    with pytest.raises(ValueError):
        OptimizerState(w=np.zeros(2), eta0=0.1, t=0)


def test_inv_sqrt_schedule_values():
    st = OptimizerState(w=np.zeros(2), eta0=0.2, schedule=SCHEDULE_INV_SQRT)
    assert st.eta() == 0.2
    st.t = 4
    assert st.eta() == pytest.approx(0.1)
    st.t = 100
    assert st.eta() == pytest.approx(0.02)


def test_constant_schedule_ignores_t():
    st = OptimizerState(w=np.zeros(2), eta0=0.3, schedule=SCHEDULE_CONSTANT, t=57)
    assert st.eta() == 0.3


# ---------------------------------------------------------------------------
# phi

def test_phi_between_hand_values():
    e = np.array([1.0, 0.0])
    assert phi_between(e, e) == pytest.approx(0.0)
    assert phi_between(e, -e) == pytest.approx(math.pi)
    assert phi_between(e, np.array([0.0, 2.0])) == pytest.approx(math.pi / 2)


def test_phi_between_degenerate_is_none():
    assert phi_between(np.zeros(2), np.array([1.0, 0.0])) is None


def test_step_record_rejects_phi_out_of_range():
    with pytest.raises(ValueError):
        StepRecord(
            t=1, eta=0.1, domain_ids=(0,), losses=np.zeros(1), total_loss=0.0,
            variance=0.0, betas=np.ones(1), grad_norm=0.0, di_grad_norm=0.0,
            eps=None, phi=4.0, degenerate=False,
        )


# ---------------------------------------------------------------------------
# plain SGD and V-REx

def test_erm_update_is_exact_gradient_step():
    q = quad_problem()
    w0 = np.array([1.0, -1.0, 0.5, 2.0])
    st = fresh_state(w0, eta0=0.1)
    rep = q.eval(w0)
    rec = step_erm(st, q, None)
    np.testing.assert_allclose(st.w, w0 - 0.1 * rep.total_gradient(), atol=1e-15)
    assert rec.t == 1
    assert st.t == 2
    assert rec.eps is None
    assert rec.phi is None
    assert not rec.degenerate


def test_vrex_update_includes_variance_gradient():
    q = quad_problem()
    w0 = np.array([1.0, -1.0, 0.5, 2.0])
    st = fresh_state(w0, eta0=0.1)
    rep = q.eval(w0)
    from disam.objective import vrex_loss_and_gradient

    _, g = vrex_loss_and_gradient(rep, 3.0)
    step_vrex(st, q, None, beta=3.0)
    np.testing.assert_allclose(st.w, w0 - 0.1 * g, atol=1e-15)


def test_vrex_beta_zero_matches_erm_exactly():
    q = quad_problem()
    w0 = np.array([0.3, 0.7, -0.2, 0.0])
    st_a = fresh_state(w0, eta0=0.1)
    st_b = fresh_state(w0, eta0=0.1)
    for _ in range(5):
        step_erm(st_a, q, None)
        step_vrex(st_b, q, None, beta=0.0)
    np.testing.assert_array_equal(st_a.w, st_b.w)


# ---------------------------------------------------------------------------
# two-step updates

def test_sam_perturbation_has_exact_radius():
    q = quad_problem()
    st = fresh_state([1.0, 1.0, -0.5, 0.2], mode=MODE_SAM, rho=0.05)
    rec = step_sam(st, q, None)
    assert abs(np.linalg.norm(rec.eps) - 0.05) <= 1e-12 * 0.05


def test_sam_descends_with_perturbed_gradient():
    q = quad_problem()
    w0 = np.array([1.0, 1.0, -0.5, 0.2])
    st = fresh_state(w0, mode=MODE_SAM, rho=0.05, eta0=0.1)
    rep = q.eval(w0)
    g = rep.total_gradient()
    eps = 0.05 * g / np.linalg.norm(g)
    g_perturbed = q.eval(w0 + eps).total_gradient()
    step_sam(st, q, None)
    np.testing.assert_allclose(st.w, w0 - 0.1 * g_perturbed, atol=1e-14)


def test_disam_lambda_zero_is_bitwise_sam():
    q = quad_problem()
    w0 = np.array([0.9, -0.3, 0.1, 0.4])
    st_sam = fresh_state(w0, mode=MODE_SAM, rho=0.05)
    st_di = fresh_state(w0, mode=MODE_DISAM, rho=0.05, lam=0.0)
    for _ in range(10):
        ra = step_sam(st_sam, q, None)
        rb = step_disam(st_di, q, None)
        np.testing.assert_array_equal(ra.eps, rb.eps)
    np.testing.assert_array_equal(st_sam.w, st_di.w)


def test_intuitive_beta_zero_is_bitwise_sam():
    q = quad_problem()
    w0 = np.array([0.9, -0.3, 0.1, 0.4])
    st_sam = fresh_state(w0, mode=MODE_SAM, rho=0.05)
    st_in = fresh_state(w0, mode=MODE_INTUITIVE, rho=0.05, beta=0.0)
    for _ in range(10):
        step_sam(st_sam, q, None)
        step_intuitive(st_in, q, None)
    np.testing.assert_array_equal(st_sam.w, st_in.w)


def test_disam_tilts_ascent_away_from_lagging_domain():
    """The high-loss domain contributes less to the perturbation direction."""
    centers = np.array([[2.0, 0.0], [-0.5, 0.0]])
    curvs = np.array([np.eye(2), np.eye(2)])
    offsets = np.array([0.0, 0.0])
    q = QuadraticDomains(centers=centers, curvatures=curvs, offsets=offsets)
    w0 = np.zeros(2)
    rep = q.eval(w0)
    lagging = int(np.argmax(rep.losses))

    st_sam = fresh_state(w0, mode=MODE_SAM, rho=0.1)
    st_di = fresh_state(w0, mode=MODE_DISAM, rho=0.1, lam=0.4)
    rec_sam = step_sam(st_sam, q, None)
    rec_di = step_disam(st_di, q, None)
    toward = -rep.grads[lagging] / np.linalg.norm(rep.grads[lagging])
    # smaller projection onto the lagging domain's ascent direction
    assert np.dot(rec_di.eps, -toward) < np.dot(rec_sam.eps, -toward)
    assert rec_di.betas[lagging] < rec_sam.betas[lagging]


def test_degenerate_gradient_falls_back_to_plain_step():
    """At an exact shared minimum the ascent direction vanishes."""
    centers = np.zeros((2, 2))
    curvs = np.array([np.eye(2), 2.0 * np.eye(2)])
    offsets = np.zeros(2)
    q = QuadraticDomains(centers=centers, curvatures=curvs, offsets=offsets)
    st = fresh_state([0.0, 0.0], mode=MODE_SAM, rho=0.05)
    rec = step_sam(st, q, None)
    assert rec.degenerate
    assert rec.eps is None
    assert rec.phi is None
    np.testing.assert_array_equal(st.w, np.zeros(2))  # zero gradient, no move


def test_phi_recorded_from_second_perturbed_step():
    q = quad_problem()
    st = fresh_state([1.0, 0.5, -0.2, 0.3], mode=MODE_SAM, rho=0.05)
    first = step_sam(st, q, None)
    second = step_sam(st, q, None)
    assert first.phi is None
    assert 0.0 <= second.phi <= math.pi


def test_mode_mismatch_rejected():
    q = quad_problem()
    st = fresh_state([1.0, 0.5, -0.2, 0.3], mode=MODE_SAM)
    with pytest.raises(ValueError, match="mode"):
        step_disam(st, q, None)
    st_plain = fresh_state([1.0, 0.5, -0.2, 0.3])
    with pytest.raises(ValueError, match="mode"):
        step_sam(st_plain, q, None)


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_divergence_raises_with_step_index():
    centers = np.array([[0.0, 0.0], [1.0, 1.0]])
    curvs = np.array([np.eye(2), np.eye(2)])
    q = QuadraticDomains(centers=centers, curvatures=curvs, offsets=np.zeros(2))
    st = fresh_state([1e200, 0.0], eta0=0.1)
    with pytest.raises(DivergenceError) as err:
        step_erm(st, q, None)
    assert err.value.t == 1


def test_make_step_fn_covers_all_modes():
    q = quad_problem()
    for mode in ("erm", "vrex"):
        fn = make_step_fn(mode, vrex_beta=1.0)
        st = fresh_state([1.0, 0.0, 0.0, 0.0])
        fn(st, q, None)
    for mode in ("sam", "disam", "intuitive"):
        fn = make_step_fn(mode)
        st = fresh_state([1.0, 0.0, 0.0, 0.0], mode=mode)
        fn(st, q, None)
    with pytest.raises(ValueError):
        make_step_fn("adamw")


def test_records_measure_pre_update_point():
    q = quad_problem()
    w0 = np.array([1.0, -1.0, 0.5, 2.0])
    st = fresh_state(w0, eta0=0.5)
    rep0 = q.eval(w0)
    rec = step_erm(st, q, None)
    assert rec.total_loss == rep0.total
    np.testing.assert_array_equal(rec.losses, rep0.losses)
    assert rec.grad_norm == pytest.approx(np.linalg.norm(rep0.total_gradient()))
