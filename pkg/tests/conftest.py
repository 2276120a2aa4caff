import numpy as np
import pytest

from gtfrnn import ObservationModel, ShPLRNNParams


def rand_params(M, L, clipped=False, seed=0, scale=0.5):
    """Random model with moderate weights; |A| < 1 keeps orbits tame."""
    rng = np.random.default_rng(seed)
    return ShPLRNNParams(
        A=rng.uniform(-0.9, 0.9, size=M),
        W1=scale * rng.standard_normal((M, L)) / np.sqrt(L),
        W2=scale * rng.standard_normal((L, M)) / np.sqrt(M),
        h1=0.1 * rng.standard_normal(M),
        h2=0.1 * rng.standard_normal(L),
        clipped=clipped,
    )


def linear_params(a, M=1):
    """Diagonal linear model z' = a z (hidden layer disconnected)."""
    diag = np.full(M, float(a)) if np.isscalar(a) else np.asarray(a, float)
    M = len(diag)
    return ShPLRNNParams(A=diag, W1=np.zeros((M, 1)), W2=np.zeros((1, M)),
                         h1=np.zeros(M), h2=np.zeros(1))


@pytest.fixture
def identity_obs():
    def make(n):
        return ObservationModel.identity(n)
    return make


def finite_difference(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at flat array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy(); xp[i] += eps
        xm = x.copy(); xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g
