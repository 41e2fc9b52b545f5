import numpy as np
import pytest

from pcal.eif import phi_from_psi


def exact_mcar(n: int, rng: np.random.Generator, d: int = 3, s: float = 1.0, alpha=(0.2, 0.3, 0.5)):
    """MCAR draw where the projections of ``psi1`` are known in closed form.

    ``x ~ N(0, I)``, ``u ~ N(0, 1)``, ``z ~ N(0, s^2)``, ``y = u + z`` as the
    residual, and the two predictors sit at ``u -+ 1`` so that ``v = 1{z <= 0}``.
    With ``psi1 = x (u + z)`` the projections are ``x (u -+ s sqrt(2/pi))``
    given ``v`` and ``x u`` without it.
    """
    x = rng.standard_normal((n, d))
    u = rng.standard_normal(n)
    z = s * rng.standard_normal(n)
    v = z <= 0
    psi1 = x * (u + z)[:, None]
    psi2 = x * (u + np.where(v, -1.0, 1.0) * s * np.sqrt(2 / np.pi))[:, None]
    psi3 = x * u[:, None]
    a = np.asarray(alpha, dtype=float)
    pattern = np.searchsorted(np.cumsum(a), rng.random(n), side="right")
    phi = phi_from_psi(psi2, psi3, a)
    psi1_obs = np.where((pattern == 0)[:, None], psi1, np.nan)
    return psi1_obs, phi, pattern, np.tile(a, (n, 1))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def scalar_influences(e1: float, e2: float, e3: float, n: int, rng: np.random.Generator):
    """Scalar ``psi1, psi2, psi3`` whose sample moments follow the projection
    structure exactly: ``P[psi_j^2] = e_j`` and ``P[psi_i psi_j] = e_max(i,j)``."""
    q, _ = np.linalg.qr(rng.standard_normal((n, 3)))
    q *= np.sqrt(n)
    a = np.sqrt(e3) * q[:, 0]
    b = np.sqrt(e2 - e3) * q[:, 1]
    c = np.sqrt(e1 - e2) * q[:, 2]
    return (a + b + c)[:, None], (a + b)[:, None], a[:, None]


def random_e(rng: np.random.Generator):
    e = np.sort(rng.uniform(0.1, 10.0, size=3))[::-1]
    return float(e[0]), float(e[1]), float(e[2])
