"""Single-system LQR quantities: cost, covariance, gradient.

For a gain ``K`` stabilizing ``(A, B)``:

    P_K     = dlyap(A + BK, Q + K'RK)          cost orientation
    Sigma_K = dlyap((A + BK)', Sigma_w)         covariance orientation
    E_K     = 2((R + B'P_K B) K + B'P_K A)
    grad J  = E_K Sigma_K,   J = tr(P_K Sigma_w)

The batched helpers take stacks ``a: (M, n, n)``, ``b: (M, n, m)`` and are
what the sample-average and optimizer modules run on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .control_core import (
    STABILITY_MARGIN,
    InstabilityError,
    dare,
    dlyap,
    solve_lyap,
    spectral_radius,
)
from .systems import CostSpec, DimensionError, LinearSystem, as_matrix


@dataclass(frozen=True)
class LqrEval:
    cost: float
    p_k: np.ndarray
    sigma_k: np.ndarray
    e_k: np.ndarray
    gradient: np.ndarray


@dataclass(frozen=True)
class BatchEval:
    """Per-system costs and (optionally) gradients for a stack of systems."""

    costs: np.ndarray  # (M,)
    gradients: np.ndarray | None  # (M, d_u, d_x)
    p: np.ndarray
    sigma: np.ndarray | None


def _check_gain(k, d_x: int, d_u: int) -> np.ndarray:
    k = as_matrix(k, "gain")
    if k.shape != (d_u, d_x):
        raise DimensionError(f"gain shape {k.shape} != {(d_u, d_x)}")
    return k


def closed_loop_radii(k: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.atleast_1d(spectral_radius(a + b @ k))


def evaluate_batch(k, a: np.ndarray, b: np.ndarray, cost: CostSpec, gradients: bool = True) -> BatchEval:
    """Evaluate ``J(K, theta_i)`` (and gradients) for every system in a stack.

    Raises :class:`InstabilityError` naming the first index whose closed loop
    is not strictly stable.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.ndim == 2:
        a, b = a[None], b[None]
    k = _check_gain(k, a.shape[-1], b.shape[-1])
    acl = a + b @ k
    rho = np.atleast_1d(spectral_radius(acl))
    bad = np.flatnonzero(~(rho < 1 - STABILITY_MARGIN))
    if bad.size:
        i = int(bad[0])
        raise InstabilityError(
            f"gain does not stabilize system {i} (rho = {rho[i]:.12g})", index=i, rho=float(rho[i])
        )
    qk = cost.q + k.T @ cost.r @ k
    p = solve_lyap(acl, qk)
    costs = np.einsum("...ij,ji->...", p, cost.sigma_w)
    if not gradients:
        return BatchEval(costs, None, p, None)
    sigma = solve_lyap(acl, cost.sigma_w, adjoint=True)
    bt = np.swapaxes(b, -1, -2)
    e = 2.0 * ((cost.r + bt @ p @ b) @ k + bt @ p @ a)
    return BatchEval(costs, e @ sigma, p, sigma)


def lqr_cost(k, sys: LinearSystem, cost: CostSpec) -> float:
    """Average infinite-horizon cost ``tr(P_K Sigma_w)``; unstable gains raise."""
    k = _check_gain(k, sys.d_x, sys.d_u)
    p = dlyap(sys.closed_loop(k), cost.q + k.T @ cost.r @ k).value
    return float(np.trace(p @ cost.sigma_w))


def lqr_eval(k, sys: LinearSystem, cost: CostSpec) -> LqrEval:
    k = _check_gain(k, sys.d_x, sys.d_u)
    acl = sys.closed_loop(k)
    p = dlyap(acl, cost.q + k.T @ cost.r @ k).value
    sigma = dlyap(acl, cost.sigma_w, adjoint=True).value
    e = 2.0 * ((cost.r + sys.b.T @ p @ sys.b) @ k + sys.b.T @ p @ sys.a)
    return LqrEval(float(np.trace(p @ cost.sigma_w)), p, sigma, e, e @ sigma)


def grad_domination_gap(k, sys: LinearSystem, cost: CostSpec) -> tuple[float, float]:
    """``(J(K) - J(K*), ||Sigma_{K*}|| * ||grad J(K)||_F^2)``.

    The first never exceeds the second for a stabilizing ``K``.
    """
    k_star = dare(sys, cost).k
    at_k = lqr_eval(k, sys, cost)
    at_star = lqr_eval(k_star, sys, cost)
    lhs = at_k.cost - at_star.cost
    rhs = np.linalg.norm(at_star.sigma_k, 2) * np.linalg.norm(at_k.gradient) ** 2
    return float(lhs), float(rhs)
