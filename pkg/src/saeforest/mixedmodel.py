"""Weighted random-intercept model with the fixed part as a unit-coefficient offset.

The working model per area i is

    y_l,i = offset_i + nu_i * 1 + eps_i,   nu_i ~ N(0, sigma2),  eps_ij ~ N(0, 1/w_ij)

so each area's covariance is the rank-one form V_i = sigma2 * J + diag(1/w_i),
which gives closed forms for the log-likelihood, its determinant term and the
random-effect BLUP without assembling any n x n matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

SIGMA2_MAX = 100.0
SIGMA2_TOL = 1e-8
# gll() clamps sigma2 below by this to keep log(sigma2) finite at a boundary
# estimate; used only inside the convergence monitor.
GLL_SIGMA2_FLOOR = 1e-8

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class VarianceComponents:
    sigma2_nu: float

    def __post_init__(self):
        if not np.isfinite(self.sigma2_nu) or self.sigma2_nu < 0:
            raise ValueError("sigma2_nu must be finite and nonnegative")


class GroupedData:
    """Linearized response, offset, weights and area labels, with per-area
    sufficient statistics precomputed.

    Weights must lie in (0, 0.25] (the logistic-variance range after
    clamping).  Residuals are ``y_l - offset`` throughout.
    """

    def __init__(self, y_l, offset, weights, area):
        self.y_l = np.asarray(y_l, dtype=np.float64)
        self.offset = np.asarray(offset, dtype=np.float64)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.area = np.asarray(area)
        n = self.y_l.shape[0]
        if not (self.offset.shape == self.weights.shape == self.area.shape == (n,)):
            raise ValueError("y_l, offset, weights and area must have equal length")
        if not np.all(np.isfinite(self.y_l)) or not np.all(np.isfinite(self.offset)):
            raise ValueError("non-finite response or offset")
        if np.any(self.weights <= 0) or np.any(self.weights > 0.25 * (1 + 1e-9)):
            raise ValueError("weights must lie in (0, 0.25]")
        self.area_ids, self.area_index = np.unique(self.area, return_inverse=True)
        self.n_areas = self.area_ids.shape[0]
        self.n = n
        r = self.y_l - self.offset
        self.residuals = r
        # per-area: T = sum w, S = sum w*r, Q = sum w*r^2, C = sum log(1/w)
        self.T = np.bincount(self.area_index, weights=self.weights)
        self.S = np.bincount(self.area_index, weights=self.weights * r)
        self.Q = np.bincount(self.area_index, weights=self.weights * r * r)
        self.C = np.bincount(self.area_index, weights=-np.log(self.weights))


def profile_loglik(data: GroupedData, sigma2: float) -> float:
    """Gaussian log-likelihood of the residuals at a given sigma2.

    Uses the rank-one identities
        log|V_i| = sum_j log(1/w_ij) + log(1 + sigma2 * T_i)
        r_i' V_i^-1 r_i = Q_i - sigma2 * S_i^2 / (1 + sigma2 * T_i)
    """
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    denom = 1.0 + sigma2 * data.T
    logdet = float(np.sum(data.C) + np.sum(np.log1p(sigma2 * data.T)))
    quad = float(np.sum(data.Q) - sigma2 * np.sum(data.S**2 / denom))
    return -0.5 * (data.n * _LOG_2PI + logdet + quad)


def estimate_sigma2(
    data: GroupedData,
    sigma2_max: float = SIGMA2_MAX,
    tol: float = SIGMA2_TOL,
    max_iter: int = 500,
) -> VarianceComponents:
    """Maximize the profiled likelihood over sigma2 in [0, sigma2_max].

    Scalar bounded (Brent-style) search; the boundary value 0 is legal and
    preferred on ties, so a zero-residual fit returns exactly 0.
    """
    res = minimize_scalar(
        lambda s: -profile_loglik(data, s),
        bounds=(0.0, sigma2_max),
        method="bounded",
        options={"xatol": tol, "maxiter": max_iter},
    )
    if not res.success:
        raise RuntimeError(
            "variance optimizer did not converge: "
            f"{res.message} (iterations={res.nit}, last x={res.x:.6g})"
        )
    candidates = np.array([0.0, float(res.x), float(sigma2_max)])
    lls = np.array([profile_loglik(data, s) for s in candidates])
    return VarianceComponents(sigma2_nu=float(candidates[int(np.argmax(lls))]))


def blup(data: GroupedData, vc: VarianceComponents) -> np.ndarray:
    """Random-intercept BLUP per area, aligned with ``data.area_ids``.

    Closed form nu_i = sigma2 * S_i / (1 + sigma2 * T_i), the q=1 case of the
    usual H Z' V^-1 r matrix expression.
    """
    s2 = vc.sigma2_nu
    return s2 * data.S / (1.0 + s2 * data.T)


def gll(data: GroupedData, nu: np.ndarray, vc: VarianceComponents) -> float:
    """Generalized log-likelihood convergence criterion.

    Per area: weighted SSR at the given random effects, plus nu_i^2/sigma2,
    log sigma2 and the log-determinant of the inverse weights.  sigma2 is
    clamped below at GLL_SIGMA2_FLOOR here only.
    """
    nu = np.asarray(nu, dtype=np.float64)
    if nu.shape != (data.n_areas,):
        raise ValueError("nu must have one entry per area")
    s2 = max(vc.sigma2_nu, GLL_SIGMA2_FLOOR)
    # sum_j w (r - nu_i)^2 = Q_i - 2 nu_i S_i + nu_i^2 T_i
    ssr = data.Q - 2.0 * nu * data.S + nu**2 * data.T
    return float(np.sum(ssr + nu**2 / s2 + np.log(s2) + data.C))
