import numpy as np
import pytest
import scipy.linalg as sla

from drlqr.control_core import spectral_radius
from drlqr.domain import ParamDistribution, pendulum_family
from drlqr.systems import CostSpec, LinearSystem

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# -- independent oracles (scipy / direct algebra) --------------------------------

def lyap_oracle(a, q):
    """P = A'PA + Q via scipy (which solves X = A X A' + Q)."""
    return sla.solve_discrete_lyapunov(np.asarray(a).T, q)


def dare_oracle(a, b, q, r):
    p = sla.solve_discrete_are(a, b, q, r)
    k = -np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a)
    return p, k


def fd_cost(k, sys, cost, h=1e-6):
    """Central differences of J(K) = tr(P_K Sigma_w) via scipy; step h * max(1, |K_ij|)."""

    def j(kk):
        acl = sys.a + sys.b @ kk
        return float(np.trace(lyap_oracle(acl, cost.q + kk.T @ cost.r @ kk) @ cost.sigma_w))

    g = np.zeros_like(k)
    for idx in np.ndindex(k.shape):
        step = h * max(1.0, abs(k[idx]))
        e = np.zeros_like(k)
        e[idx] = step
        g[idx] = (j(k + e) - j(k - e)) / (2 * step)
    return g


# -- random instances ----------------------------------------------------------------

def random_system(rng, n, m, rho_max=1.3):
    a = rng.standard_normal((n, n))
    a *= rng.uniform(0.2, rho_max) / max(spectral_radius(a), 1e-3)
    b = rng.standard_normal((n, m))
    return LinearSystem(a, b)


def random_cost(rng, n, m, normalized=False):
    if normalized:
        x = rng.standard_normal((n, n))
        return CostSpec(np.eye(n) + 0.5 * x @ x.T, np.eye(m), np.eye(n))
    x = rng.standard_normal((n, n))
    y = rng.standard_normal((m, m))
    z = rng.standard_normal((n, n))
    return CostSpec(x @ x.T + 0.1 * np.eye(n), y @ y.T + 0.5 * np.eye(m), z @ z.T + 0.1 * np.eye(n))


def random_stabilizing_gain(rng, sys, cost, spread=0.3, rho_cap=0.97):
    """Optimal gain plus a perturbation, kept only if the closed loop stays stable."""
    _, k_star = dare_oracle(sys.a, sys.b, cost.q, cost.r)
    for _ in range(100):
        k = k_star + spread * rng.standard_normal(k_star.shape)
        if spectral_radius(sys.a + sys.b @ k) < rho_cap:
            return k
        spread *= 0.7
    return k_star


def random_instance(rng, n=None, m=None, normalized=False):
    n = n or int(rng.integers(1, 5))
    m = m or int(rng.integers(1, n + 1))
    sys = random_system(rng, n, m)
    cost = random_cost(rng, n, m, normalized)
    return sys, cost, random_stabilizing_gain(rng, sys, cost)


# -- shared fixtures -----------------------------------------------------------------

@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def pendulum():
    return pendulum_family(0.01, 10.0)


@pytest.fixture(scope="session")
def box():
    return ParamDistribution([0.75, 0.75], [1.25, 1.25])


@pytest.fixture(scope="session")
def unit_cost():
    return CostSpec.identity(2, 1)


@pytest.fixture
def scalar():
    return LinearSystem([[0.5]], [[1.0]]), CostSpec.identity(1, 1)
