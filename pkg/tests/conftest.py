import numpy as np
import pytest

from saeforest.mixedmodel import GroupedData


def dense_covariance(weights, area, sigma2):
    """Block covariance sigma2*J + diag(1/w), assembled explicitly."""
    weights = np.asarray(weights, dtype=float)
    area = np.asarray(area)
    _, inv = np.unique(area, return_inverse=True)
    n = weights.shape[0]
    V = np.zeros((n, n))
    for k in range(inv.max() + 1):
        rows = np.flatnonzero(inv == k)
        V[np.ix_(rows, rows)] += sigma2
    V[np.diag_indices(n)] += 1.0 / weights
    return V


def dense_loglik(data: GroupedData, sigma2: float) -> float:
    """Multivariate-normal log-density of the residuals, no rank-one tricks."""
    V = dense_covariance(data.weights, data.area, sigma2)
    r = data.residuals
    n = r.shape[0]
    sign, logdet = np.linalg.slogdet(V)
    assert sign > 0
    return float(-0.5 * (n * np.log(2 * np.pi) + logdet + r @ np.linalg.solve(V, r)))


def dense_blup(data: GroupedData, sigma2: float) -> np.ndarray:
    """Matrix form H Z' V^-1 (y_l - offset) with H = sigma2 * I."""
    _, inv = np.unique(data.area, return_inverse=True)
    n = data.n
    d = inv.max() + 1
    Z = np.zeros((n, d))
    Z[np.arange(n), inv] = 1.0
    V = dense_covariance(data.weights, data.area, sigma2)
    return sigma2 * Z.T @ np.linalg.solve(V, data.residuals)


def random_grouped_data(rng, max_areas=6, max_per_area=5) -> GroupedData:
    d = rng.integers(1, max_areas + 1)
    sizes = rng.integers(1, max_per_area + 1, size=d)
    area = np.repeat(np.arange(d), sizes)
    n = area.shape[0]
    return GroupedData(
        y_l=rng.normal(0, 2, size=n),
        offset=rng.normal(0, 1, size=n),
        weights=rng.uniform(0.01, 0.25, size=n),
        area=area,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
