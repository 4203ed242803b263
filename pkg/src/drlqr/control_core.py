"""Dense kernels for small discrete-time control problems.

All routines accept a single matrix or a stack with leading batch dimensions
(``(..., n, n)``); batching is how the sample-average code evaluates hundreds
of systems per iteration without a Python loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .systems import CostSpec, DimensionError, LinearSystem, as_matrix

STABILITY_MARGIN = 1e-9
KRON_MAX_DIM = 8
DLYAP_TOL = 1e-9
DARE_TOL = 1e-12
DARE_MAX_ITERS = 100_000
NEWTON_STEPS = 3


class InstabilityError(ArithmeticError):
    """A closed loop required to be stable is not.

    ``index`` identifies the offending member of a batch (or ``None``) and
    ``rho`` its spectral radius.
    """

    def __init__(self, message: str, index=None, rho: float | None = None, detail=None):
        super().__init__(message)
        self.index = index
        self.rho = rho
        self.detail = detail


class ConvergenceError(RuntimeError):
    """An iterative solve stopped before meeting its tolerance."""

    def __init__(self, message: str, residual: float | None = None, iterations: int | None = None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class SolveReport:
    value: np.ndarray
    residual_norm: float
    iterations_used: int


@dataclass(frozen=True)
class DareSolution:
    p: np.ndarray
    k: np.ndarray
    residual_norm: float
    iterations_used: int


def _check_square(m: np.ndarray, name: str = "matrix") -> None:
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise DimensionError(f"{name} must be square, got shape {m.shape}")


def spectral_radius(m) -> float | np.ndarray:
    """Largest eigenvalue modulus; vectorized over leading dimensions.

    1x1 and 2x2 blocks use the characteristic polynomial directly, larger
    ones go through LAPACK's Hessenberg-QR.
    """
    m = np.asarray(m, dtype=float)
    _check_square(m)
    n = m.shape[-1]
    if n == 1:
        out = np.abs(m[..., 0, 0])
    elif n == 2:
        half_tr = 0.5 * (m[..., 0, 0] + m[..., 1, 1])
        det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
        disc = half_tr * half_tr - det
        root = np.sqrt(np.abs(disc))
        real_case = np.maximum(np.abs(half_tr + root), np.abs(half_tr - root))
        complex_case = np.sqrt(np.abs(det))
        out = np.where(disc >= 0, real_case, complex_case)
    else:
        out = np.max(np.abs(np.linalg.eigvals(m)), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _kron_self(f: np.ndarray) -> np.ndarray:
    n = f.shape[-1]
    return np.einsum("...ik,...jl->...ijkl", f, f).reshape(f.shape[:-2] + (n * n, n * n))


def _symmetrize(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + np.swapaxes(p, -1, -2))


def lyap_kron(a: np.ndarray, q: np.ndarray, adjoint: bool = False) -> np.ndarray:
    """Direct vectorized solve of ``P = A'PA + Q`` (``P = APA' + Q`` when ``adjoint``)."""
    a = np.asarray(a, float)
    n = a.shape[-1]
    f = a if adjoint else np.swapaxes(a, -1, -2)
    lhs = np.eye(n * n) - _kron_self(f)
    q = np.broadcast_to(np.asarray(q, float), a.shape[:-2] + (n, n))
    p = np.linalg.solve(lhs, q.reshape(a.shape[:-2] + (n * n, 1)))
    return _symmetrize(p.reshape(a.shape))


def lyap_doubling(a: np.ndarray, q: np.ndarray, adjoint: bool = False, max_iters: int = 64) -> tuple[np.ndarray, int]:
    """Squared-Smith iteration; the k-th pass accounts for ``2^k`` terms of the series."""
    f = np.asarray(a, float)
    if adjoint:
        f = np.swapaxes(f, -1, -2)
    p = np.broadcast_to(np.asarray(q, float), f.shape).copy()
    ft = np.swapaxes(f, -1, -2)
    for it in range(1, max_iters + 1):
        inc = ft @ p @ f
        p = p + inc
        f = f @ f
        ft = np.swapaxes(f, -1, -2)
        if np.max(np.abs(inc)) <= 1e-17 * max(1.0, np.max(np.abs(p))):
            return _symmetrize(p), it
    return _symmetrize(p), max_iters


def lyap_residual(a: np.ndarray, p: np.ndarray, q: np.ndarray, adjoint: bool = False) -> np.ndarray:
    a = np.asarray(a, float)
    at = np.swapaxes(a, -1, -2)
    r = (a @ p @ at if adjoint else at @ p @ a) - p + q
    return np.linalg.norm(r, axis=(-2, -1))


def solve_lyap(a: np.ndarray, q: np.ndarray, adjoint: bool = False) -> np.ndarray:
    """Unchecked batched solve used on hot paths; stability is the caller's job."""
    if np.asarray(a).shape[-1] <= KRON_MAX_DIM:
        return lyap_kron(a, q, adjoint)
    return lyap_doubling(a, q, adjoint)[0]


def dlyap(a, q, adjoint: bool = False, tol: float = DLYAP_TOL) -> SolveReport:
    """Solve the discrete Lyapunov equation.

    ``adjoint=False`` gives ``P = A'PA + Q`` (cost matrix of a closed loop);
    ``adjoint=True`` gives ``P = APA' + Q`` (its stationary covariance).

    Raises :class:`InstabilityError` when ``rho(a) >= 1 - STABILITY_MARGIN``
    and :class:`ConvergenceError` when the residual exceeds
    ``tol * max(1, ||Q||_F)``.
    """
    a = as_matrix(a, "a")
    q = as_matrix(q, "q")
    _check_square(a, "a")
    if q.shape != a.shape:
        raise DimensionError(f"q shape {q.shape} != a shape {a.shape}")
    rho = spectral_radius(a)
    if rho >= 1 - STABILITY_MARGIN:
        raise InstabilityError(f"dlyap needs a stable matrix, rho = {rho:.12g}", rho=rho)
    if a.shape[0] <= KRON_MAX_DIM:
        p, iters = lyap_kron(a, q, adjoint), 1
    else:
        p, iters = lyap_doubling(a, q, adjoint)
    res = float(lyap_residual(a, p, q, adjoint))
    if res > tol * max(1.0, float(np.linalg.norm(q))):
        raise ConvergenceError(f"dlyap residual {res:.3e} above tolerance", residual=res, iterations=iters)
    return SolveReport(p, res, iters)


def riccati_residual(a, b, q, r, p) -> np.ndarray:
    at = np.swapaxes(a, -1, -2)
    bt = np.swapaxes(b, -1, -2)
    bpa = bt @ p @ a
    res = q + at @ p @ a - np.swapaxes(bpa, -1, -2) @ np.linalg.solve(r + bt @ p @ b, bpa) - p
    return np.linalg.norm(res, axis=(-2, -1))


def riccati_recursion(a, b, q, r, tol: float = DARE_TOL, max_iters: int = DARE_MAX_ITERS):
    """Value iteration ``P <- Q + A'PA - A'PB (R + B'PB)^{-1} B'PA`` from ``P = Q``.

    Works on stacks; stops when every member's successive difference drops
    below ``tol * max(1, ||P||_F)``.  Returns ``(P, K, iterations)`` with
    ``K = -(R + B'PB)^{-1} B'PA``.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    q = np.asarray(q, float)
    r = np.asarray(r, float)
    at = np.swapaxes(a, -1, -2)
    bt = np.swapaxes(b, -1, -2)
    p = np.broadcast_to(q, a.shape).copy()
    for it in range(1, max_iters + 1):
        bpa = bt @ p @ a
        with np.errstate(over="ignore", invalid="ignore"):
            p_next = _symmetrize(q + at @ p @ a - np.swapaxes(bpa, -1, -2) @ np.linalg.solve(r + bt @ p @ b, bpa))
            diff = np.linalg.norm(p_next - p, axis=(-2, -1))
            p = p_next
            # a finite P can still overflow its norm; treat that as divergence too
            p_norm = np.linalg.norm(p, axis=(-2, -1))
            if not (np.all(np.isfinite(p_norm)) and np.all(np.isfinite(diff))):
                raise ConvergenceError("Riccati recursion diverged", iterations=it)
            if np.all(diff <= tol * np.maximum(1.0, p_norm)):
                break
    else:
        raise ConvergenceError(
            f"Riccati recursion did not converge in {max_iters} iterations",
            residual=float(np.max(diff)),
            iterations=max_iters,
        )
    k = -np.linalg.solve(r + bt @ p @ b, bt @ p @ a)
    return p, k, it


def dare(sys: LinearSystem, cost: CostSpec, tol: float = DARE_TOL, max_iters: int = DARE_MAX_ITERS) -> DareSolution:
    """Stabilizing solution of the discrete algebraic Riccati equation.

    The gain follows the ``u = Kx`` convention, so the optimal closed loop is
    ``A + B K`` with ``K = -(R + B'PB)^{-1} B'PA``.
    """
    if cost.d_x != sys.d_x or cost.d_u != sys.d_u:
        raise DimensionError("cost and system dimensions differ")
    a, b, q, r = sys.a, sys.b, cost.q, cost.r
    p, k, iters = riccati_recursion(a, b, q, r, tol, max_iters)
    rho = spectral_radius(a + b @ k)
    if rho >= 1 - STABILITY_MARGIN:
        raise InstabilityError("Riccati fixed point is not stabilizing (system not stabilizable?)", rho=rho)
    # Value iteration stops with an error of about tol / (1 - rho^2); a couple of
    # policy-iteration (Newton) steps remove it.
    res = float(riccati_residual(a, b, q, r, p))
    for _ in range(NEWTON_STEPS):
        p_k = lyap_kron(a + b @ k, q + k.T @ r @ k) if sys.d_x <= KRON_MAX_DIM else \
            lyap_doubling(a + b @ k, q + k.T @ r @ k)[0]
        k_new = -np.linalg.solve(r + b.T @ p_k @ b, b.T @ p_k @ a)
        res_new = float(riccati_residual(a, b, q, r, p_k))
        if not res_new < res:
            break
        p, k, res = p_k, k_new, res_new
    return DareSolution(p, k, res, iters)


def is_stabilizing(k, sys: LinearSystem) -> bool:
    """``rho(A + BK) < 1`` with the module's safety margin."""
    return bool(spectral_radius(sys.closed_loop(k)) < 1 - STABILITY_MARGIN)
