"""Plant and cost containers, plus the ingestion-time cost normalization.

Every bound the library checks assumes the normalized setting ``Sigma_w = I``,
``R = I`` and ``Q >= I``.  Raw problems are mapped into that setting once by
:func:`normalize`, which returns both the normalized :class:`CostSpec` and a
:class:`Normalization` able to transform systems, gains and costs between the
two coordinate frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Matrix shapes are inconsistent."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.atleast_2d(np.asarray(x, dtype=float))
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if m.size == 0:
        raise DimensionError(f"{name} must have positive dimensions")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def _check_symmetric(m: np.ndarray, name: str) -> np.ndarray:
    if m.shape[0] != m.shape[1]:
        raise DimensionError(f"{name} must be square, got {m.shape}")
    if not np.allclose(m, m.T, rtol=1e-10, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    return 0.5 * (m + m.T)


@dataclass(frozen=True)
class LinearSystem:
    """``x_{t+1} = a x_t + b u_t + w_t`` for one parameter draw."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = as_matrix(self.a, "a")
        b = as_matrix(self.b, "b")
        if a.shape[0] != a.shape[1]:
            raise DimensionError(f"a must be square, got {a.shape}")
        if b.shape[0] != a.shape[0]:
            raise DimensionError(f"b has {b.shape[0]} rows, a has {a.shape[0]}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def d_x(self) -> int:
        return self.a.shape[0]

    @property
    def d_u(self) -> int:
        return self.b.shape[1]

    def closed_loop(self, k: np.ndarray) -> np.ndarray:
        k = as_matrix(k, "k")
        if k.shape != (self.d_u, self.d_x):
            raise DimensionError(f"gain shape {k.shape} != {(self.d_u, self.d_x)}")
        return self.a + self.b @ k


@dataclass(frozen=True)
class CostSpec:
    """Quadratic stage cost ``x'Qx + u'Ru`` driven by noise of covariance ``sigma_w``."""

    q: np.ndarray
    r: np.ndarray
    sigma_w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", _check_symmetric(as_matrix(self.q, "q"), "q"))
        object.__setattr__(self, "r", _check_symmetric(as_matrix(self.r, "r"), "r"))
        object.__setattr__(
            self, "sigma_w", _check_symmetric(as_matrix(self.sigma_w, "sigma_w"), "sigma_w")
        )
        if self.sigma_w.shape != self.q.shape:
            raise DimensionError("sigma_w and q must have the same shape")
        if np.linalg.eigvalsh(self.r)[0] <= 0:
            raise ValueError("r must be positive definite")
        if np.linalg.eigvalsh(self.q)[0] < -1e-12:
            raise ValueError("q must be positive semidefinite")

    @classmethod
    def identity(cls, d_x: int, d_u: int) -> "CostSpec":
        return cls(np.eye(d_x), np.eye(d_u), np.eye(d_x))

    @property
    def d_x(self) -> int:
        return self.q.shape[0]

    @property
    def d_u(self) -> int:
        return self.r.shape[0]

    @property
    def is_normalized(self) -> bool:
        eye_x, eye_u = np.eye(self.d_x), np.eye(self.d_u)
        return (
            np.allclose(self.sigma_w, eye_x, atol=1e-12)
            and np.allclose(self.r, eye_u, atol=1e-12)
            and np.linalg.eigvalsh(self.q)[0] >= 1 - 1e-12
        )


def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    if w[0] <= 0:
        raise ValueError("matrix must be positive definite")
    return (v * np.sqrt(w)) @ v.T


@dataclass(frozen=True)
class Normalization:
    """Change of coordinates ``x = S z``, ``u = sqrt(c) R^{-1/2} v``, cost scaled by ``1/c``.

    In the ``(z, v)`` frame the noise is white, the input weight is the
    identity and the state weight satisfies ``Q >= I``.
    """

    s: np.ndarray  # Sigma_w^{1/2}
    r_half: np.ndarray  # R^{1/2}
    scale: float  # c; raw cost = c * normalized cost

    @classmethod
    def identity(cls, d_x: int, d_u: int) -> "Normalization":
        return cls(np.eye(d_x), np.eye(d_u), 1.0)

    def system(self, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map raw ``(A, B)`` (optionally stacked) into the normalized frame."""
        s_inv = np.linalg.inv(self.s)
        a_n = s_inv @ np.asarray(a, float) @ self.s
        b_n = s_inv @ np.asarray(b, float) @ np.linalg.inv(self.r_half) * np.sqrt(self.scale)
        return a_n, b_n

    def gain_from_raw(self, k: np.ndarray) -> np.ndarray:
        return self.r_half @ np.asarray(k, float) @ self.s / np.sqrt(self.scale)

    def gain_to_raw(self, k: np.ndarray) -> np.ndarray:
        return np.sqrt(self.scale) * np.linalg.solve(self.r_half, np.asarray(k, float)) @ np.linalg.inv(self.s)

    def cost_to_raw(self, j: float) -> float:
        return self.scale * j


def normalize(q, r, sigma_w) -> tuple[CostSpec, Normalization]:
    """Reduce a raw ``(Q, R, Sigma_w)`` triple to the normalized setting.

    The cost is only rescaled when ``lambda_min(S Q S) < 1``; a state weight
    already dominating the identity is left alone.
    """
    raw = CostSpec(q, r, sigma_w)
    s = _sym_sqrt(raw.sigma_w)
    r_half = _sym_sqrt(raw.r)
    q_z = s @ raw.q @ s
    lam_min = float(np.linalg.eigvalsh(q_z)[0])
    if lam_min <= 0:
        raise ValueError("q must be positive definite to normalize")
    scale = min(1.0, lam_min)
    cost = CostSpec(q_z / scale, np.eye(raw.d_u), np.eye(raw.d_x))
    return cost, Normalization(s, r_half, scale)
