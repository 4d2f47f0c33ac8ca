"""Step engines: plain SGD, perturbed two-step variants, and V-REx.

All variants share one state object and one record format so traces are
directly comparable. The perturbed variants (step_sam, step_disam,
step_intuitive) differ only in how the per-domain weights for the ascent
direction are computed; the descent step always uses the plain weighted
loss gradient at the perturbed point, evaluated on the same batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .objective import (
    MODE_DISAM,
    MODE_INTUITIVE,
    MODE_SAM,
    ConvergenceTracker,
    DomainLossReport,
    PerturbationSpec,
    domain_variance,
    intuitive_weights,
    perturbation_weights,
    vrex_loss_and_gradient,
    weighted_gradient_sum,
)
from .param_math import DELTA_NORM, l2_norm

SCHEDULE_CONSTANT = "constant"
SCHEDULE_INV_SQRT = "inv_sqrt"
SCHEDULES = (SCHEDULE_CONSTANT, SCHEDULE_INV_SQRT)


class DivergenceError(RuntimeError):
    """A step produced a non-finite loss or gradient."""

    def __init__(self, message: str, t: int):
        super().__init__(message)
        self.t = t


@dataclass
class OptimizerState:
    """Mutable per-run state: parameters, step counter, schedule, tracker."""

    w: np.ndarray
    eta0: float
    schedule: str = SCHEDULE_CONSTANT
    spec: PerturbationSpec | None = None
    t: int = 1
    last_perturbation: np.ndarray | None = None
    tracker: ConvergenceTracker = field(default_factory=ConvergenceTracker)

    def __post_init__(self):
        if self.eta0 <= 0:
            raise ValueError(f"eta0 must be positive, got {self.eta0}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.t < 1:
            raise ValueError("step counter starts at 1")

    def eta(self) -> float:
        if self.schedule == SCHEDULE_INV_SQRT:
            return self.eta0 / math.sqrt(self.t)
        return self.eta0


@dataclass(frozen=True)
class StepRecord:
    """Everything measured during one optimizer step, taken at the
    pre-update parameters."""

    t: int
    eta: float
    domain_ids: tuple[int, ...]
    losses: np.ndarray
    total_loss: float
    variance: float
    betas: np.ndarray
    grad_norm: float
    di_grad_norm: float
    eps: np.ndarray | None
    phi: float | None
    degenerate: bool

    def __post_init__(self):
        if self.phi is not None and not (0.0 <= self.phi <= math.pi + 1e-12):
            raise ValueError(f"phi out of [0, pi]: {self.phi}")


def phi_between(eps_prev: np.ndarray, eps_curr: np.ndarray) -> float | None:
    """Angle in [0, pi] between successive perturbations; None if either is
    degenerate."""
    n1 = l2_norm(eps_prev)
    n2 = l2_norm(eps_curr)
    if n1 <= DELTA_NORM or n2 <= DELTA_NORM:
        return None
    cos = float(np.dot(eps_prev, eps_curr)) / (n1 * n2)
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def _evaluate(state: OptimizerState, problem, batch) -> DomainLossReport:
    report = problem.eval(state.w, batch)
    if not report.is_finite():
        raise DivergenceError(f"non-finite loss or gradient at step {state.t}", state.t)
    return report


def _descend_record(
    state: OptimizerState,
    report: DomainLossReport,
    descent_grad: np.ndarray,
    betas: np.ndarray,
    di_grad_norm: float,
    eps: np.ndarray | None,
    phi: float | None,
    degenerate: bool,
) -> StepRecord:
    eta = state.eta()
    record = StepRecord(
        t=state.t,
        eta=eta,
        domain_ids=report.domain_ids,
        losses=report.losses,
        total_loss=report.total,
        variance=domain_variance(report.losses),
        betas=betas,
        grad_norm=l2_norm(report.total_gradient()),
        di_grad_norm=di_grad_norm,
        eps=eps,
        phi=phi,
        degenerate=degenerate,
    )
    state.w = state.w - eta * descent_grad
    state.t += 1
    return record


def step_erm(state: OptimizerState, problem, batch) -> StepRecord:
    """Plain SGD on the weighted total loss."""
    report = _evaluate(state, problem, batch)
    state.tracker.observe(report.domain_ids, report.losses)
    g = report.total_gradient()
    state.last_perturbation = None
    return _descend_record(
        state, report, g, report.weights, l2_norm(g), None, None, False
    )


def step_vrex(state: OptimizerState, problem, batch, beta: float) -> StepRecord:
    """SGD on total loss plus beta times the domain-loss variance."""
    report = _evaluate(state, problem, batch)
    state.tracker.observe(report.domain_ids, report.losses)
    _, g = vrex_loss_and_gradient(report, beta)
    state.last_perturbation = None
    return _descend_record(
        state, report, g, report.weights, l2_norm(g), None, None, False
    )


def _two_step(
    state: OptimizerState, problem, batch, report: DomainLossReport, betas: np.ndarray
) -> StepRecord:
    v = weighted_gradient_sum(betas, report.grads)
    v_norm = l2_norm(v)
    if v_norm <= DELTA_NORM:
        # Degenerate ascent direction: fall back to a plain step and flag it.
        state.last_perturbation = None
        g = report.total_gradient()
        return _descend_record(state, report, g, betas, v_norm, None, None, True)
    rho = state.spec.rho
    eps = (rho / v_norm) * v
    ascent_report = problem.eval(state.w + eps, batch)
    if not ascent_report.is_finite():
        raise DivergenceError(
            f"non-finite loss or gradient at perturbed point, step {state.t}", state.t
        )
    phi = None
    if state.last_perturbation is not None:
        phi = phi_between(state.last_perturbation, eps)
    state.last_perturbation = eps
    g = ascent_report.total_gradient()
    return _descend_record(state, report, g, betas, v_norm, eps, phi, False)


def _require_mode(state: OptimizerState, mode: str) -> None:
    if state.spec is None or state.spec.mode != mode:
        have = None if state.spec is None else state.spec.mode
        raise ValueError(f"state configured for mode {have!r}, not {mode!r}")


def step_sam(state: OptimizerState, problem, batch) -> StepRecord:
    """Two-step update with the plain weighted gradient as ascent direction."""
    _require_mode(state, MODE_SAM)
    report = _evaluate(state, problem, batch)
    state.tracker.observe(report.domain_ids, report.losses)
    return _two_step(state, problem, batch, report, report.weights.copy())


def step_disam(state: OptimizerState, problem, batch) -> StepRecord:
    """Two-step update whose ascent direction reweights domains by their
    loss deviation from the mean."""
    _require_mode(state, MODE_DISAM)
    report = _evaluate(state, problem, batch)
    state.tracker.observe(report.domain_ids, report.losses)
    lam = state.spec.lam
    if lam == 0.0:
        betas = report.weights.copy()
    else:
        betas = perturbation_weights(report, lam)
    return _two_step(state, problem, batch, report, betas)


def step_intuitive(state: OptimizerState, problem, batch) -> StepRecord:
    """Two-step update with convergence-gap-boosted ascent weights."""
    _require_mode(state, MODE_INTUITIVE)
    report = _evaluate(state, problem, batch)
    state.tracker.observe(report.domain_ids, report.losses)
    betas = intuitive_weights(state.tracker, report, state.spec.beta_intuitive)
    return _two_step(state, problem, batch, report, betas)


MODE_ERM = "erm"
MODE_VREX = "vrex"
ALL_MODES = (MODE_ERM, MODE_SAM, MODE_DISAM, MODE_INTUITIVE, MODE_VREX)


def make_step_fn(mode: str, vrex_beta: float = 0.0):
    """Uniform (state, problem, batch) -> StepRecord callable for any mode."""
    if mode == MODE_ERM:
        return step_erm
    if mode == MODE_VREX:
        return lambda state, problem, batch: step_vrex(state, problem, batch, vrex_beta)
    if mode == MODE_SAM:
        return step_sam
    if mode == MODE_DISAM:
        return step_disam
    if mode == MODE_INTUITIVE:
        return step_intuitive
    raise ValueError(f"unknown mode {mode!r}")
