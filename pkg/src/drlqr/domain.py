"""Parametric system families, sampling, and sample-average objectives."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .control_core import InstabilityError, riccati_recursion
from .lqr import evaluate_batch
from .systems import CostSpec, LinearSystem, Normalization

HOEFFDING_DELTA = 0.05
HET_CONSTANT = 5e5


@dataclass(frozen=True)
class SystemFamily:
    """A deterministic map ``theta -> (A(theta), B(theta))``.

    ``batch_map`` takes an ``(N, d_theta)`` array and returns stacks
    ``(N, d_x, d_x)``, ``(N, d_x, d_u)``.
    """

    name: str
    param_names: tuple[str, ...]
    lower: np.ndarray
    upper: np.ndarray
    batch_map: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]

    @property
    def parameter_dim(self) -> int:
        return len(self.param_names)

    def stacks(self, params) -> tuple[np.ndarray, np.ndarray]:
        params = np.atleast_2d(np.asarray(params, float))
        if params.shape[1] != self.parameter_dim:
            raise ValueError(f"expected {self.parameter_dim} parameters, got {params.shape[1]}")
        if np.any(params < self.lower) or np.any(params > self.upper):
            raise ValueError(f"parameters outside the support of family {self.name!r}")
        return self.batch_map(params)

    def system(self, theta) -> LinearSystem:
        a, b = self.stacks(theta)
        return LinearSystem(a[0], b[0])

    def normalized(self, norm: Normalization) -> "SystemFamily":
        base = self.batch_map

        def mapped(params):
            return norm.system(*base(params))

        return SystemFamily(self.name, self.param_names, self.lower, self.upper, mapped)


def pendulum_family(dt: float = 0.01, g: float = 10.0) -> SystemFamily:
    """Euler-discretized inverted pendulum linearized about upright; ``theta = (m, l)``.

    ``A = [[1, dt], [g dt / l, 1]]``, ``B = [[0], [dt / (m l^2)]]``.
    """
    if not dt >= 0 or not g > 0:
        raise ValueError("need dt >= 0 and g > 0")

    def batch_map(params):
        m, ell = params[:, 0], params[:, 1]
        n = params.shape[0]
        a = np.empty((n, 2, 2))
        a[:, 0, 0] = 1.0
        a[:, 0, 1] = dt
        a[:, 1, 0] = g * dt / ell
        a[:, 1, 1] = 1.0
        b = np.zeros((n, 2, 1))
        b[:, 1, 0] = dt / (m * ell**2)
        return a, b

    tiny = np.finfo(float).tiny
    return SystemFamily("pendulum", ("m", "l"), np.array([tiny, tiny]), np.array([np.inf, np.inf]), batch_map)


def affine_family(a0, b0, a_dirs: Sequence = (), b_dirs: Sequence = (), lower=None, upper=None) -> SystemFamily:
    """``A(theta) = A0 + sum_j theta_j A_j`` and likewise for ``B``.

    With no directions this is a single fixed plant (``d_theta = 0``).
    """
    a0 = np.atleast_2d(np.asarray(a0, float))
    b0 = np.atleast_2d(np.asarray(b0, float))
    a_dirs = np.asarray(a_dirs, float).reshape(-1, *a0.shape)
    b_dirs = np.asarray(b_dirs, float).reshape(-1, *b0.shape)
    d = max(len(a_dirs), len(b_dirs))
    if len(a_dirs) == 0:
        a_dirs = np.zeros((d,) + a0.shape)
    if len(b_dirs) == 0:
        b_dirs = np.zeros((d,) + b0.shape)
    if len(a_dirs) != len(b_dirs):
        raise ValueError("a_dirs and b_dirs must have the same length")
    lower = np.full(d, -np.inf) if lower is None else np.asarray(lower, float)
    upper = np.full(d, np.inf) if upper is None else np.asarray(upper, float)

    def batch_map(params):
        a = a0 + np.einsum("nj,jkl->nkl", params, a_dirs)
        b = b0 + np.einsum("nj,jkl->nkl", params, b_dirs)
        return a, b

    names = tuple(f"theta{j}" for j in range(d))
    return SystemFamily("affine", names, lower, upper, batch_map)


@dataclass(frozen=True)
class ParamDistribution:
    """Independent uniform coordinates on the box ``[lower, upper]``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, float))
        hi = np.atleast_1d(np.asarray(self.upper, float))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("need lower <= upper coordinatewise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def box(cls, lower: float, upper: float, dim: int) -> "ParamDistribution":
        return cls(np.full(dim, lower), np.full(dim, upper))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        u = rng.random((n, self.lower.size))
        return self.lower + (self.upper - self.lower) * u


def _pairwise_max_spectral(stacked: np.ndarray, chunk: int = 256) -> float:
    best = 0.0
    n = stacked.shape[0]
    for start in range(0, n, chunk):
        block = stacked[start : start + chunk]
        diff = block[:, None] - stacked[None, :]
        best = max(best, float(np.max(np.linalg.norm(diff, ord=2, axis=(-2, -1)))))
    return best


@dataclass(frozen=True, eq=False)
class SampleSet:
    """``M`` drawn systems stored as stacks ``a: (M, n, n)``, ``b: (M, n, m)``."""

    params: np.ndarray
    a: np.ndarray
    b: np.ndarray
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.a.ndim != 3 or self.b.ndim != 3 or self.a.shape[0] != self.b.shape[0] or self.a.shape[0] < 1:
            raise ValueError("a and b must be non-empty stacks of equal length")

    @classmethod
    def from_systems(cls, systems: Sequence[LinearSystem], params=None, seed=None) -> "SampleSet":
        a = np.stack([s.a for s in systems])
        b = np.stack([s.b for s in systems])
        params = np.zeros((len(systems), 0)) if params is None else np.atleast_2d(np.asarray(params, float))
        return cls(params, a, b, seed)

    def __len__(self) -> int:
        return self.a.shape[0]

    @property
    def d_x(self) -> int:
        return self.a.shape[1]

    @property
    def d_u(self) -> int:
        return self.b.shape[2]

    @property
    def systems(self) -> list[LinearSystem]:
        return [LinearSystem(a, b) for a, b in zip(self.a, self.b)]

    @cached_property
    def tau_b(self) -> float:
        return max(1.0, float(np.max(np.linalg.norm(self.b, ord=2, axis=(-2, -1)))))

    @cached_property
    def het(self) -> float:
        """Largest pairwise spectral norm of ``[A_i B_i] - [A_j B_j]``."""
        return _pairwise_max_spectral(np.concatenate([self.a, self.b], axis=2))

    def discounted(self, gamma: float) -> "SampleSet":
        s = math.sqrt(gamma)
        return SampleSet(self.params, s * self.a, s * self.b, self.seed, {**self.meta, "gamma": gamma})

    def concat(self, other: "SampleSet") -> "SampleSet":
        return SampleSet(
            np.concatenate([self.params, other.params]),
            np.concatenate([self.a, other.a]),
            np.concatenate([self.b, other.b]),
            None,
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "meta": self.meta,
            "params": self.params.tolist(),
            "a": self.a.tolist(),
            "b": self.b.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleSet":
        a = np.asarray(d["a"], float)
        params = np.asarray(d["params"], float).reshape(a.shape[0], -1)
        return cls(params, a, np.asarray(d["b"], float), d.get("seed"), dict(d.get("meta") or {}))

    def save(self, path) -> None:
        # json writes repr() floats, which round-trip doubles exactly
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "SampleSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def draw_samples(family: SystemFamily, dist: ParamDistribution, m: int, seed: int) -> SampleSet:
    """Draw ``m`` parameters i.i.d. from ``dist`` with a PCG64 stream seeded by ``seed``."""
    if m < 1:
        raise ValueError("need at least one sample")
    if dist.lower.size != family.parameter_dim:
        raise ValueError("distribution and family parameter dimensions differ")
    if np.any(dist.lower < family.lower) or np.any(dist.upper > family.upper):
        raise ValueError("distribution support leaves the family's support")
    rng = np.random.default_rng(seed)
    params = dist.sample(rng, m)
    a, b = family.stacks(params)
    return SampleSet(params, a, b, seed, {"family": family.name})


def sample_avg_cost(k, samples: SampleSet, cost: CostSpec) -> float:
    return float(np.mean(evaluate_batch(k, samples.a, samples.b, cost, gradients=False).costs))


def sample_avg_gradient(k, samples: SampleSet, cost: CostSpec) -> np.ndarray:
    return np.mean(evaluate_batch(k, samples.a, samples.b, cost).gradients, axis=0)


def sample_avg_eval(k, samples: SampleSet, cost: CostSpec) -> tuple[float, np.ndarray]:
    ev = evaluate_batch(k, samples.a, samples.b, cost)
    return float(np.mean(ev.costs)), np.mean(ev.gradients, axis=0)


def hoeffding_halfwidth(j_bound: float, n: int, delta: float = HOEFFDING_DELTA) -> float:
    """Two-sided Hoeffding radius for an average of ``n`` variables in ``[0, j_bound]``."""
    return math.sqrt(2.0 * j_bound**2 / n * math.log(2.0 / delta))


@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: float
    halfwidth: float  # plug-in: j_max is the largest observed cost
    j_max: float
    n: int
    delta: float
    apriori_halfwidth: float | None = None  # from 48 * J(K(theta_ref), theta_ref)


def mc_costs(k, family: SystemFamily, dist: ParamDistribution, n_mc: int, seed: int,
             cost: CostSpec, chunk: int = 20_000) -> np.ndarray:
    """Per-draw costs of ``k`` on ``n_mc`` fresh draws, in draw order."""
    rng = np.random.default_rng(seed)
    params = dist.sample(rng, n_mc)
    out = np.empty(n_mc)
    for start in range(0, n_mc, chunk):
        p = params[start : start + chunk]
        a, b = family.stacks(p)
        try:
            out[start : start + len(p)] = evaluate_batch(k, a, b, cost, gradients=False).costs
        except InstabilityError as exc:
            theta = p[exc.index]
            raise InstabilityError(
                f"gain does not stabilize draw theta = {theta.tolist()}",
                index=start + exc.index, rho=exc.rho, detail=theta,
            ) from None
    return out


def mc_dr_cost(k, family: SystemFamily, dist: ParamDistribution, n_mc: int, seed: int,
               cost: CostSpec, delta: float = HOEFFDING_DELTA, reference_theta=None) -> MonteCarloEstimate:
    """Monte-Carlo estimate of the domain-randomized objective with a Hoeffding radius."""
    costs = mc_costs(k, family, dist, n_mc, seed, cost)
    j_max = float(np.max(costs))
    apriori = None
    if reference_theta is not None:
        ref = family.system(reference_theta)
        p_ref, _, _ = riccati_recursion(ref.a, ref.b, cost.q, cost.r)
        apriori = hoeffding_halfwidth(48.0 * float(np.trace(p_ref @ cost.sigma_w)), n_mc, delta)
    return MonteCarloEstimate(float(np.mean(costs)), hoeffding_halfwidth(j_max, n_mc, delta),
                              j_max, n_mc, delta, apriori)


@dataclass(frozen=True)
class HeterogeneityReport:
    het: float
    bound: float
    satisfied: bool
    tau_b: float
    worst_index: int  # sample attaining the bound


def heterogeneity_check(samples: SampleSet, cost: CostSpec) -> HeterogeneityReport:
    """Compare the empirical heterogeneity with ``1 / (5e5 tau_B tr(P*)^{11/2})``.

    Diagnostic only; nothing refuses to run when it fails.
    """
    p, _, _ = riccati_recursion(samples.a, samples.b, cost.q, cost.r)
    tr = np.trace(p, axis1=-2, axis2=-1)
    # log-domain keeps tr^{11/2} from overflowing on large costs
    log_bounds = -(math.log(HET_CONSTANT) + math.log(samples.tau_b) + 5.5 * np.log(tr))
    i = int(np.argmin(log_bounds))
    bound = math.exp(log_bounds[i])
    het = samples.het
    return HeterogeneityReport(het, bound, het <= bound, samples.tau_b, i)


@dataclass(frozen=True)
class BoundednessReport:
    b_bound: float
    slack: float
    satisfied: bool
    witness: tuple[int, int, float] | None  # (gain index, sample index, J_i / J_SA)
    checked: int  # gains inside the B-sublevel set
    max_ratio: float
    j_star: float


def boundedness_check(k_list, samples: SampleSet, cost: CostSpec, b_bound: float, slack: float,
                      j_star: float | None = None) -> BoundednessReport:
    """Check ``J(K, theta_i) <= slack * J_SA(K)`` for every listed ``K`` with
    ``J_SA(K) <= b_bound * J_SA*``.

    ``j_star`` defaults to the smallest ``J_SA`` over ``k_list``; pass the
    certified optimum when it is known.
    """
    per_gain = [evaluate_batch(k, samples.a, samples.b, cost, gradients=False).costs for k in k_list]
    means = [float(np.mean(c)) for c in per_gain]
    if j_star is None:
        j_star = min(means)
    witness = None
    checked = 0
    max_ratio = 0.0
    for gi, (costs, mean) in enumerate(zip(per_gain, means)):
        if mean > b_bound * j_star:
            continue
        checked += 1
        ratios = costs / mean
        max_ratio = max(max_ratio, float(np.max(ratios)))
        over = np.flatnonzero(costs > slack * mean * (1 + 1e-12))  # rounding guard for slack = M
        if witness is None and over.size:
            witness = (gi, int(over[0]), float(ratios[over[0]]))
    return BoundednessReport(b_bound, slack, witness is None, witness, checked, max_ratio, float(j_star))
