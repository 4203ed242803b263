"""Policy-gradient procedures for sample-average and domain-randomized LQR.

* :func:`policy_gradient` -- batch gradient descent on ``J_SA``.
* :func:`discount_annealing` -- grows a discount factor from a value where
  ``K = 0`` is admissible up to 1, re-optimizing ``K`` along the way.
* :func:`sgd` -- one freshly drawn system per step, discounted by the
  current closed-loop spectral radius.
* :func:`entropic_pg` -- descent on the entropic risk ``(1/t) log mean exp(t J)``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .control_core import ConvergenceError, InstabilityError, spectral_radius
from .domain import ParamDistribution, SampleSet, SystemFamily
from .lqr import evaluate_batch
from .systems import CostSpec, LinearSystem

GAMMA_TOL = 1e-6
INITIAL_GAMMA_FACTOR = 8.0
GAMMA_BAND = (2.5, 4.0)
# Relative slack of the descent test: near the optimum the decrease per step
# falls below the rounding error of a cost evaluation.
DESCENT_SLACK = 1e-12


@dataclass(frozen=True)
class PgConfig:
    alpha: float = 1e-3
    max_iters: int = 10_000
    grad_tol: float = 1e-6
    eps: float = 1e-4  # target excess cost; reported, the stopping rule is grad_tol
    line_search: bool = True  # halve alpha until the step descends (instability always halves)
    max_halvings: int = 60

    def __post_init__(self):
        if not (self.alpha > 0 and self.grad_tol > 0 and self.eps > 0 and self.max_iters >= 0):
            raise ValueError("PgConfig fields must be positive")


@dataclass(frozen=True)
class RiskConfig:
    t: float = 1.0

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class AnnealSchedule:
    """Step size and step count of each inner descent as a function of gamma.

    ``phases`` is a sequence of ``(gamma_upper, alpha, n_steps)``; the first
    phase with ``gamma < gamma_upper`` applies.  ``n_steps=None`` means
    "descend until the inner gradient tolerance".
    """

    phases: tuple = ((1.0, 1e-3, 20),)

    def for_gamma(self, gamma: float) -> tuple[float, int | None]:
        for upper, alpha, n_steps in self.phases:
            if gamma < upper:
                return alpha, n_steps
        _, alpha, n_steps = self.phases[-1]
        return alpha, n_steps

    @classmethod
    def quanser(cls) -> "AnnealSchedule":
        return cls(((0.85, 1e-3, 160), (1.0, 1e-5, 480)))


@dataclass
class TraceRow:
    n: int
    gamma: float
    j_sa: float
    grad_norm: float
    k: np.ndarray
    gradient: np.ndarray
    wall_ms: float
    phase: int = 0
    j_er: float | None = None
    weight_sum: float | None = None


@dataclass
class GammaStep:
    gamma: float
    gamma_next: float
    j_start: float  # J_SA(K | gamma) when the outer iteration began
    j_before: float  # J_SA(K | gamma) after the inner descent
    j_after: float  # J_SA(K | gamma_next)
    terminal: bool


@dataclass
class Trace:
    algo: str
    rows: list[TraceRow] = field(default_factory=list)
    gamma_steps: list[GammaStep] = field(default_factory=list)
    converged: bool = False
    steps: int = 0  # accepted gradient steps
    best_index: int | None = None
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def record(self, gamma, j, grad, k, phase=0, **extra) -> TraceRow:
        row = TraceRow(self.steps, float(gamma), float(j), float(np.linalg.norm(grad)),
                       np.array(k, copy=True), np.array(grad, copy=True),
                       1e3 * (time.perf_counter() - self._t0), phase, **extra)
        self.rows.append(row)
        return row

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    @property
    def zeta0(self) -> float:
        return self.rows[0].j_sa

    def phase_rows(self, phase: int) -> list[TraceRow]:
        return [r for r in self.rows if r.phase == phase]

    def estimate_smoothness(self) -> float:
        """Largest observed ``||grad(K') - grad(K)|| / ||K' - K||`` between consecutive iterates
        of one phase; a lower estimate of the smoothness constant."""
        best = 0.0
        for prev, cur in zip(self.rows, self.rows[1:]):
            if prev.phase != cur.phase or prev.gamma != cur.gamma:
                continue
            dk = np.linalg.norm(cur.k - prev.k)
            if dk > 0:
                best = max(best, float(np.linalg.norm(cur.gradient - prev.gradient) / dk))
        return best


def theorem1_budget(l_est: float, zeta0: float, tau_b: float, eps: float) -> int:
    """Iteration count ``ceil(2 L zeta0 max(1/eps, 64 tau_B zeta0))`` after which the
    best-gradient iterate is ``eps``-optimal (under the heterogeneity bound)."""
    if min(l_est, zeta0, tau_b, eps) <= 0:
        raise ValueError("all inputs must be positive")
    return math.ceil(2.0 * l_est * zeta0 * max(1.0 / eps, 64.0 * tau_b * zeta0))


def discount_system(sys: LinearSystem, gamma: float) -> LinearSystem:
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    s = math.sqrt(gamma)
    return LinearSystem(s * sys.a, s * sys.b)


def discounted_cost(k, samples: SampleSet, cost: CostSpec, gamma: float) -> float:
    """``J_SA(K | gamma)``, or ``inf`` when ``K`` does not stabilize every discounted system."""
    s = math.sqrt(gamma)
    try:
        return float(np.mean(evaluate_batch(k, s * samples.a, s * samples.b, cost, gradients=False).costs))
    except InstabilityError:
        return math.inf


# -- generic descent ---------------------------------------------------------

Objective = Callable[[np.ndarray], tuple[float, np.ndarray, dict]]


def _sample_average_objective(samples: SampleSet, cost: CostSpec, gamma: float = 1.0) -> Objective:
    s = math.sqrt(gamma)
    a, b = s * samples.a, s * samples.b

    def objective(k):
        ev = evaluate_batch(k, a, b, cost)
        return float(np.mean(ev.costs)), np.mean(ev.gradients, axis=0), {}

    return objective


def _descend(objective: Objective, k0, alpha: float, max_steps: int | None, grad_tol: float,
             trace: Trace, gamma: float, phase: int, line_search: bool, max_halvings: int,
             step_cap: int):
    """Gradient descent with step rejection; records every iterate.

    Returns ``(k_last, k_best)`` where ``k_best`` has the smallest gradient
    norm seen in this call (first one on ties).
    """
    k = np.array(k0, dtype=float)
    val, d, extra = objective(k)
    best_k, best_norm = k, math.inf
    limit = step_cap if max_steps is None else max_steps
    for step in range(limit + 1):
        row = trace.record(gamma, extra.pop("j_sa", val), d, k, phase, **extra)
        if row.grad_norm < best_norm:
            best_k, best_norm = k, row.grad_norm
            trace.best_index = len(trace.rows) - 1
        if row.grad_norm <= grad_tol:
            trace.converged = True
            break
        if step == limit:
            break
        a = alpha
        for _ in range(max_halvings):
            k_new = k - a * d
            try:
                val_new, d_new, extra_new = objective(k_new)
            except InstabilityError:
                a *= 0.5
                continue
            if line_search and not val_new <= val + DESCENT_SLACK * abs(val):
                a *= 0.5
                continue
            break
        else:
            raise ConvergenceError(
                f"no acceptable step after {max_halvings} halvings (gamma = {gamma})",
                residual=row.grad_norm, iterations=trace.steps,
            )
        k, val, d, extra = k_new, val_new, d_new, extra_new
        trace.steps += 1
    return k, best_k


def policy_gradient(k0, samples: SampleSet, cost: CostSpec, cfg: PgConfig = PgConfig(),
                    gamma: float = 1.0, trace: Trace | None = None) -> tuple[np.ndarray, Trace]:
    """Batch policy gradient ``K <- K - alpha * mean_i grad J(K, theta_i)``.

    Stops when the averaged gradient norm reaches ``cfg.grad_tol`` or after
    ``cfg.max_iters`` steps and returns the iterate of smallest gradient norm.
    Steps that leave the jointly stabilizing set (or, with ``line_search``,
    fail to descend) are retried at half the step size.
    """
    trace = trace if trace is not None else Trace("batch")
    objective = _sample_average_objective(samples, cost, gamma)
    try:
        objective(np.asarray(k0, float))
    except InstabilityError as exc:
        raise InstabilityError(f"initial gain is not jointly stabilizing: {exc}", exc.index, exc.rho) from None
    trace.converged = False
    phase = trace.rows[-1].phase + 1 if trace.rows else 0
    _, k_best = _descend(objective, k0, cfg.alpha, cfg.max_iters, cfg.grad_tol, trace, gamma, phase,
                         cfg.line_search, cfg.max_halvings, cfg.max_iters)
    return k_best, trace


# -- discount annealing --------------------------------------------------------

def bisect_initial_gamma(samples: SampleSet, cost: CostSpec, tol: float = GAMMA_TOL) -> float:
    """Largest ``gamma`` (to ``tol``) with ``J_SA(0 | gamma) <= 8 tr(Q Sigma_w)``.

    As ``gamma -> 0`` the zero gain costs ``tr(Q Sigma_w)`` (``= d_x`` in the
    normalized unit-weight case) and the cost is nondecreasing in ``gamma``.
    """
    k0 = np.zeros((samples.d_u, samples.d_x))
    threshold = INITIAL_GAMMA_FACTOR * float(np.trace(cost.q @ cost.sigma_w))
    if discounted_cost(k0, samples, cost, 1.0) <= threshold:
        return 1.0
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if discounted_cost(k0, samples, cost, mid) <= threshold:
            lo = mid
        else:
            hi = mid
    if lo == 0.0:
        raise ConvergenceError("no positive discount factor meets the initial cost threshold")
    return lo


def bisect_gamma_step(k, samples: SampleSet, cost: CostSpec, gamma: float,
                      band: tuple[float, float] = GAMMA_BAND, max_iters: int = 200) -> float:
    """Next discount ``gamma' in (gamma, 1]`` with
    ``2.5 J_SA(K|gamma) <= J_SA(K|gamma') <= 4 J_SA(K|gamma)``.

    Returns 1 whenever ``J_SA(K|1) <= 4 J_SA(K|gamma)`` (this covers the
    terminal case where even ``gamma' = 1`` stays below the 2.5 factor).
    """
    j0 = discounted_cost(k, samples, cost, gamma)
    if not math.isfinite(j0):
        raise InstabilityError(f"gain does not stabilize the systems at gamma = {gamma}")
    lo_t, hi_t = band[0] * j0, band[1] * j0
    if discounted_cost(k, samples, cost, 1.0) <= hi_t:
        return 1.0
    lo, hi = gamma, 1.0
    for _ in range(max_iters):
        mid = 0.5 * (lo + hi)
        j = discounted_cost(k, samples, cost, mid)
        if j < lo_t:
            lo = mid
        elif j > hi_t:
            hi = mid
        else:
            return mid
        if hi - lo <= 4 * np.finfo(float).eps * hi:
            break
    return lo


def discount_annealing(samples: SampleSet, cost: CostSpec, cfg: PgConfig = PgConfig(),
                       schedule: AnnealSchedule = AnnealSchedule(), inner_grad_tol: float | None = None,
                       max_outer: int = 10_000) -> tuple[np.ndarray, Trace]:
    """Find a jointly stabilizing, ``J_SA``-optimal gain starting from ``K = 0``.

    Each outer pass runs an inner descent on ``J_SA(. | gamma)`` (step size
    and count from ``schedule``, stopping early once the gradient norm is
    below ``inner_grad_tol``, default ``1e-4 d_x``), then raises gamma by
    bisection so the cost grows by a factor in ``[2.5, 4]``.  Once gamma
    reaches 1 a final :func:`policy_gradient` run with ``cfg`` finishes.
    Trace phases: one per inner descent, the last being the final run.
    """
    if inner_grad_tol is None:
        inner_grad_tol = 1e-4 * samples.d_x
    trace = Trace("anneal")
    k = np.zeros((samples.d_u, samples.d_x))
    gamma = bisect_initial_gamma(samples, cost)
    phase = 0
    for _ in range(max_outer):
        if gamma >= 1.0:
            break
        alpha, n_steps = schedule.for_gamma(gamma)
        objective = _sample_average_objective(samples, cost, gamma)
        j_start = objective(k)[0]
        k, _ = _descend(objective, k, alpha, n_steps, inner_grad_tol, trace, gamma, phase,
                        cfg.line_search, cfg.max_halvings, cfg.max_iters)
        j_before = discounted_cost(k, samples, cost, gamma)
        gamma_next = bisect_gamma_step(k, samples, cost, gamma)
        j_after = discounted_cost(k, samples, cost, gamma_next)
        terminal = gamma_next == 1.0 and j_after < GAMMA_BAND[0] * j_before
        trace.gamma_steps.append(GammaStep(gamma, gamma_next, j_start, j_before, j_after, terminal))
        gamma = gamma_next
        phase += 1
    else:
        raise ConvergenceError(f"discount annealing did not reach gamma = 1 in {max_outer} passes")
    trace.converged = False
    objective = _sample_average_objective(samples, cost)
    _, k_best = _descend(objective, k, cfg.alpha, cfg.max_iters, cfg.grad_tol, trace, 1.0, phase,
                         cfg.line_search, cfg.max_halvings, cfg.max_iters)
    return k_best, trace


# -- stochastic gradient descent ------------------------------------------------

def sgd(family: SystemFamily, dist: ParamDistribution, cost: CostSpec, n_iters: int, alpha: float,
        gamma0: float, seed: int, decay: float = 0.0) -> tuple[np.ndarray, Trace]:
    """One sampled system per step, discounted by ``min(gamma0 / rho(A + BK)^2, 1)``.

    Row ``n`` of the trace evaluates ``K_n`` on draw ``n``; there are
    ``n_iters + 1`` rows.  ``decay > 0`` uses ``alpha / (1 + decay * n)``.
    """
    if not alpha > 0 or not 0 < gamma0 < 1 or n_iters < 0:
        raise ValueError("need alpha > 0, 0 < gamma0 < 1 and n_iters >= 0")
    rng = np.random.default_rng(seed)
    a_all, b_all = family.stacks(dist.sample(rng, n_iters + 1))
    trace = Trace("sgd")
    k = np.zeros((b_all.shape[2], a_all.shape[1]))
    for n in range(n_iters + 1):
        a, b = a_all[n], b_all[n]
        rho = float(spectral_radius(a + b @ k))
        gamma = 1.0 if rho == 0 else min(gamma0 / rho**2, 1.0)
        s = math.sqrt(gamma)
        ev = evaluate_batch(k, s * a, s * b, cost)  # stable by construction: rho_gamma^2 <= gamma0
        g = ev.gradients[0]
        trace.record(gamma, ev.costs[0], g, k)
        if n == n_iters:
            break
        k = k - alpha / (1.0 + decay * n) * g
        trace.steps += 1
    return k, trace


# -- entropic risk ---------------------------------------------------------------

def entropic_weights(costs, t: float) -> np.ndarray:
    """Softmax of ``t * costs``, shifted by the maximum so nothing overflows."""
    c = np.asarray(costs, float)
    e = np.exp(t * (c - np.max(c)))
    return e / np.sum(e)


def entropic_risk(costs, t: float) -> float:
    """``(1/t) log mean exp(t * costs)``, computed stably for small and large ``t``."""
    c = np.asarray(costs, float)
    m = float(np.max(c))
    return m + float(np.log1p(np.mean(np.expm1(t * (c - m))))) / t


def entropic_objective(samples: SampleSet, cost: CostSpec, t: float) -> Objective:
    def objective(k):
        ev = evaluate_batch(k, samples.a, samples.b, cost)
        w = entropic_weights(ev.costs, t)
        direction = np.einsum("i,ijk->jk", w, ev.gradients)
        return entropic_risk(ev.costs, t), direction, {"j_sa": float(np.mean(ev.costs)),
                                                        "weight_sum": float(np.sum(w))}

    return objective


def entropic_pg(k0, samples: SampleSet, cost: CostSpec, risk: RiskConfig = RiskConfig(),
                cfg: PgConfig = PgConfig()) -> tuple[np.ndarray, Trace]:
    """Descent along the softmax-weighted gradient, i.e. the gradient of the entropic risk.

    Rows carry ``j_sa`` (plain mean), ``j_er`` and the weight sum.
    """
    objective = entropic_objective(samples, cost, risk.t)

    def with_er(k):
        val, d, extra = objective(k)
        extra["j_er"] = val
        return val, d, extra

    try:
        objective(np.asarray(k0, float))
    except InstabilityError as exc:
        raise InstabilityError(f"initial gain is not jointly stabilizing: {exc}", exc.index, exc.rho) from None
    trace = Trace("entropic")
    _, k_best = _descend(with_er, k0, cfg.alpha, cfg.max_iters, cfg.grad_tol, trace, 1.0, 0,
                         cfg.line_search, cfg.max_halvings, cfg.max_iters)
    return k_best, trace
