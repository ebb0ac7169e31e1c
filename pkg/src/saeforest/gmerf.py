"""Mixed-effects random forest for binary responses, fitted by iterated
linearization.

Macro iterations refresh the working response and weights around the current
probabilities; within each macro iteration an EM-style micro loop alternates
forest updates on the decorrelated response with variance-component and
random-effect estimates, monitored by the generalized log-likelihood.

Three stabilizations make the doubly-iterative process a convergent
deterministic fixed-point iteration rather than a random walk at the
forest-resampling noise floor: (1) within a micro loop the tree structures
are grown once, at the loop's entry response, and later micro iterations
only refresh leaf values (which depend linearly on the shifted response);
(2) tree structures and in-bag draws are re-grown only for the first
``structure_macros`` macro iterations, after which the remaining updates
(leaf values, random effects, variance, linearization) form a smooth map
with an exact fixed point; (3) the macro update of eta can be under-relaxed
(``macro_relax`` < 1), which leaves the fixed point unchanged but damps the
feedback through the re-linearized response.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, logit

from .forest import (
    Forest,
    ForestConfig,
    OobPrediction,
    TrainingSet,
    apply_forest,
    fit_forest,
    oob_predict,
    refresh_leaf_values,
)
from .mixedmodel import GroupedData, VarianceComponents, blup, estimate_sigma2, gll


@dataclass(frozen=True)
class GmerfConfig:
    forest: ForestConfig = field(default_factory=ForestConfig)
    gll_rel_tol: float = 1e-5
    eta_rel_tol: float = 0.01
    max_micro: int = 100
    max_macro: int = 50
    mu_clamp_eps: float = 1e-6
    macro_relax: float = 0.5
    structure_macros: int = 3

    def __post_init__(self):
        if self.gll_rel_tol <= 0 or self.eta_rel_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_micro < 1 or self.max_macro < 1:
            raise ValueError("iteration caps must be >= 1")
        if not (0 < self.mu_clamp_eps < 0.5):
            raise ValueError("mu_clamp_eps must be in (0, 0.5)")
        if not (0 < self.macro_relax <= 1.0):
            raise ValueError("macro_relax must be in (0, 1]")
        if self.structure_macros < 1:
            raise ValueError("structure_macros must be >= 1")


@dataclass
class FitTrace:
    """Per-iteration convergence record.

    ``gll[B]`` holds the micro-loop GLL values of macro iteration B;
    ``eta_change[B-1]`` the relative eta change checked at macro iteration
    B >= 2.  Cap flags mark termination by iteration limit, not tolerance.
    """

    gll: list = field(default_factory=list)
    eta_change: list = field(default_factory=list)
    micro_capped: list = field(default_factory=list)
    macro_capped: bool = False

    @property
    def n_macro(self) -> int:
        return len(self.gll)


@dataclass
class MicroResult:
    forest: Forest
    nu: np.ndarray
    vc: VarianceComponents
    gll_trace: list
    oob: OobPrediction
    capped: bool
    grouped: GroupedData
    train_leaves: np.ndarray


@dataclass
class GmerfModel:
    """Fitted state: forest fixed part, per-area random intercepts and their
    variance, plus the convergence trace and in-sample fitted values."""

    forest: Forest
    nu_hat: dict
    sigma2_nu: float
    area_ids_sampled: frozenset
    trace: FitTrace
    config: GmerfConfig
    n_by_area: dict
    oob_fallback: np.ndarray
    eta_insample: np.ndarray
    mu_insample: np.ndarray

    @property
    def converged(self) -> bool:
        return not self.trace.macro_capped


def initialize_mu(y: np.ndarray) -> np.ndarray:
    """Initial mean values: 0.75 where y is 1, 0.25 where y is 0."""
    y = np.asarray(y)
    vals = np.unique(y)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError("response must be binary 0/1")
    return np.where(y == 1, 0.75, 0.25)


def linearize(y, mu, clamp_eps: float = 1e-6):
    """First-order working response and weights around mu.

    Returns ``(y_l, w)`` with ``y_l = logit(mu) + (y - mu) / (mu (1 - mu))``
    and ``w = mu (1 - mu)``; mu is clamped into
    ``[clamp_eps, 1 - clamp_eps]`` first so both stay finite.
    """
    y = np.asarray(y, dtype=np.float64)
    mu = np.clip(np.asarray(mu, dtype=np.float64), clamp_eps, 1.0 - clamp_eps)
    w = mu * (1.0 - mu)
    y_l = logit(mu) + (y - mu) / w
    return y_l, w


def fit_micro(y_l, w, X, area, cfg: GmerfConfig, nu0=None, reuse=None) -> MicroResult:
    """EM-style inner loop at fixed working response and weights.

    Alternates (i) decorrelating the response by the current random effects,
    (ii) a weighted forest update, (iii) out-of-bag prediction, (iv-v)
    variance component and BLUP updates with the OOB values as offset, until
    the GLL changes by less than ``gll_rel_tol`` relatively or ``max_micro``
    is hit.

    The forest's structure and in-bag draws are grown once at the entry
    response (``nu0`` defaults to zero random effects); later iterations
    refresh leaf values only, so the loop is a deterministic affine
    fixed-point iteration with an exact limit.  ``reuse`` carries a
    ``(forest, train_leaves)`` pair from a previous fit to skip the structure
    growth entirely.
    """
    y_l = np.asarray(y_l, dtype=np.float64)
    area = np.asarray(area)
    area_ids, inv = np.unique(area, return_inverse=True)
    if nu0 is None:
        nu = np.zeros(area_ids.shape[0])
    else:
        nu = np.asarray(nu0, dtype=np.float64).copy()
        if nu.shape != (area_ids.shape[0],):
            raise ValueError("nu0 must have one entry per area")

    ts = TrainingSet(X, y_l - nu[inv], w)
    if reuse is None:
        forest = fit_forest(ts, cfg.forest)
        train_leaves = apply_forest(forest, ts.features)
        grown = True
    else:
        forest, train_leaves = reuse
        grown = False

    gll_trace = []
    capped = True
    oob = grouped = vc = None
    for b in range(cfg.max_micro):
        if b > 0 or not grown:
            forest = refresh_leaf_values(forest, y_l - nu[inv], w, train_leaves)
        oob = oob_predict(forest, ts, train_leaves)
        grouped = GroupedData(y_l=y_l, offset=oob.values, weights=w, area=area)
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
    # align the returned forest's leaf values with the final random effects
    forest = refresh_leaf_values(forest, y_l - nu[inv], w, train_leaves)
    return MicroResult(
        forest=forest,
        nu=nu,
        vc=vc,
        gll_trace=gll_trace,
        oob=oob,
        capped=capped,
        grouped=grouped,
        train_leaves=train_leaves,
    )


def fit(y, X, area, cfg: Optional[GmerfConfig] = None) -> GmerfModel:
    """Fit the full model on binary unit-level data.

    Macro iterations: run the micro loop (warm-started from the previous
    random effects), set eta to the out-of-bag fixed part plus the random
    intercepts (under-relaxed by ``macro_relax``), refresh mu / working
    response / weights, and stop once the mean absolute relative change of
    eta (with a +1 denominator guard) drops below ``eta_rel_tol``.
    """
    cfg = cfg or GmerfConfig()
    y = np.asarray(y)
    X = np.asarray(X, dtype=np.float64)
    area = np.asarray(area)
    if y.ndim != 1 or X.ndim != 2 or not (y.shape[0] == X.shape[0] == area.shape[0]):
        raise ValueError("y, X and area must be aligned (n,), (n, p), (n,)")
    mu = initialize_mu(y)  # also validates binary y
    if np.all(y == y[0]):
        raise ValueError("degenerate response: all observations equal")

    area_ids, inv = np.unique(area, return_inverse=True)
    y_l, w = linearize(y, mu, cfg.mu_clamp_eps)

    trace = FitTrace()
    trace.macro_capped = True
    nu_start = None
    eta = None
    micro = None
    reuse = None
    for b_macro in range(cfg.max_macro):
        micro = fit_micro(y_l, w, X, area, cfg, nu0=nu_start, reuse=reuse)
        if b_macro + 1 >= cfg.structure_macros:
            reuse = (micro.forest, micro.train_leaves)
        trace.gll.append(micro.gll_trace)
        trace.micro_capped.append(micro.capped)
        eta_raw = micro.oob.values + micro.nu[inv]
        if eta is None:
            eta_new = eta_raw
            converged = False
        else:
            eta_new = (1.0 - cfg.macro_relax) * eta + cfg.macro_relax * eta_raw
            change = float(np.mean(np.abs(eta_new - eta) / (np.abs(eta) + 1.0)))
            trace.eta_change.append(change)
            converged = change < cfg.eta_rel_tol
        eta = eta_new
        if converged:
            trace.macro_capped = False
            break
        nu_start = micro.nu
        mu = np.clip(expit(eta), cfg.mu_clamp_eps, 1.0 - cfg.mu_clamp_eps)
        y_l, w = linearize(y, mu, cfg.mu_clamp_eps)

    ids = area_ids.tolist()
    counts = np.bincount(inv, minlength=len(ids))
    return GmerfModel(
        forest=micro.forest,
        nu_hat={a: float(v) for a, v in zip(ids, micro.nu)},
        sigma2_nu=float(micro.vc.sigma2_nu),
        area_ids_sampled=frozenset(ids),
        trace=trace,
        config=cfg,
        n_by_area={a: int(c) for a, c in zip(ids, counts)},
        oob_fallback=micro.oob.fallback,
        eta_insample=eta,
        mu_insample=np.clip(expit(eta), cfg.mu_clamp_eps, 1.0 - cfg.mu_clamp_eps),
    )
