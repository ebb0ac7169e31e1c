"""Logit random-intercept baseline fitted by the same linearization loop,
with weighted least squares in place of the forest (the linear conditional
expectation predictor used for comparisons)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import qr
from scipy.special import expit

from .areas import AreaEstimate, CensusFrame
from .gmerf import FitTrace, GmerfConfig, initialize_mu, linearize
from .mixedmodel import GroupedData, blup, estimate_sigma2, gll


@dataclass
class GlmmModel:
    beta: np.ndarray  # intercept first, then slopes
    nu_hat: dict
    sigma2_nu: float
    area_ids_sampled: frozenset
    trace: FitTrace
    n_by_area: dict
    eta_insample: np.ndarray
    mu_insample: np.ndarray

    @property
    def converged(self) -> bool:
        return not self.trace.macro_capped


def _check_full_rank(X1: np.ndarray, w: np.ndarray, names: list) -> None:
    A = np.sqrt(w)[:, None] * X1
    _, R, piv = qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag.max() * max(A.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    if rank < X1.shape[1]:
        bad = sorted(names[j] for j in piv[rank:])
        raise ValueError(f"design matrix rank deficient; dependent columns: {bad}")


def _wls(X1: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    Aw = X1 * w[:, None]
    return np.linalg.solve(X1.T @ Aw, Aw.T @ y)


def fit_glmm_pql(y, X, area, cfg: Optional[GmerfConfig] = None) -> GlmmModel:
    """Fit the linear-fixed-part analog of the forest model.

    Identical macro/micro skeleton: the micro loop replaces the forest fit by
    weighted least squares of the decorrelated response on (1, X), and the
    out-of-bag offset by the fitted values.
    """
    cfg = cfg or GmerfConfig()
    y = np.asarray(y)
    X = np.asarray(X, dtype=np.float64)
    area = np.asarray(area)
    if y.ndim != 1 or X.ndim != 2 or not (y.shape[0] == X.shape[0] == area.shape[0]):
        raise ValueError("y, X and area must be aligned (n,), (n, p), (n,)")
    mu = initialize_mu(y)
    if np.all(y == y[0]):
        raise ValueError("degenerate response: all observations equal")

    X1 = np.column_stack([np.ones(X.shape[0]), X])
    names = ["intercept"] + [f"x{j + 1}" for j in range(X.shape[1])]
    area_ids, inv = np.unique(area, return_inverse=True)
    y_l, w = linearize(y, mu, cfg.mu_clamp_eps)
    _check_full_rank(X1, w, names)

    trace = FitTrace()
    trace.macro_capped = True
    eta_prev = None
    beta = nu = vc = eta = None
    for _ in range(cfg.max_macro):
        nu = np.zeros(area_ids.shape[0])
        gll_trace = []
        capped = True
        for _ in range(cfg.max_micro):
            y_star = y_l - nu[inv]
            beta = _wls(X1, y_star, w)
            fitted = X1 @ beta
            grouped = GroupedData(y_l=y_l, offset=fitted, weights=w, area=area)
            vc = estimate_sigma2(grouped)
            nu = blup(grouped, vc)
            g = gll(grouped, nu, vc)
            gll_trace.append(g)
            if len(gll_trace) >= 2:
                prev = gll_trace[-2]
                denom = abs(prev) if prev != 0 else 1.0
                if abs(g - prev) / denom < cfg.gll_rel_tol:
                    capped = False
                    break
        trace.gll.append(gll_trace)
        trace.micro_capped.append(capped)
        eta = X1 @ beta + nu[inv]
        if eta_prev is not None:
            change = float(np.mean(np.abs(eta - eta_prev) / (np.abs(eta_prev) + 1.0)))
            trace.eta_change.append(change)
            if change < cfg.eta_rel_tol:
                trace.macro_capped = False
                break
        eta_prev = eta
        mu = np.clip(expit(eta), cfg.mu_clamp_eps, 1.0 - cfg.mu_clamp_eps)
        y_l, w = linearize(y, mu, cfg.mu_clamp_eps)

    ids = area_ids.tolist()
    counts = np.bincount(inv, minlength=len(ids))
    return GlmmModel(
        beta=beta,
        nu_hat={a: float(v) for a, v in zip(ids, nu)},
        sigma2_nu=float(vc.sigma2_nu),
        area_ids_sampled=frozenset(ids),
        trace=trace,
        n_by_area={a: int(c) for a, c in zip(ids, counts)},
        eta_insample=eta,
        mu_insample=np.clip(expit(eta), cfg.mu_clamp_eps, 1.0 - cfg.mu_clamp_eps),
    )


def cep_area_proportions(model: GlmmModel, census: CensusFrame) -> list:
    """Plug-in area proportions: census mean of expit(x'beta + nu_i), with the
    random intercept dropped for areas never sampled."""
    if census.features.shape[1] != model.beta.shape[0] - 1:
        raise ValueError(
            f"census has {census.features.shape[1]} covariates, model expects "
            f"{model.beta.shape[0] - 1}"
        )
    linpred = model.beta[0] + census.features @ model.beta[1:]
    out = []
    for k, aid in enumerate(census.area_ids.tolist()):
        in_sample = aid in model.area_ids_sampled
        nu_i = model.nu_hat[aid] if in_sample else 0.0
        rows = census.area_index == k
        mu_i = float(np.mean(expit(linpred[rows] + nu_i)))
        out.append(
            AreaEstimate(
                area_id=aid,
                mu_hat=mu_i,
                n_i=model.n_by_area.get(aid, 0),
                N_i=int(census.counts[k]),
                in_sample=in_sample,
            )
        )
    return out
