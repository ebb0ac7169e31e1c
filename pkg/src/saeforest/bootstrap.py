"""Parametric bootstrap MSE for the area-level proportion estimator.

Each replicate regenerates a full synthetic population from the fitted model
(fresh random intercepts for every census area, Bernoulli unit outcomes from
the forest fixed part), redraws the stratified sample, refits the whole model
and compares its area estimates against the replicate's realized population
proportions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Optional

import numpy as np
from scipy.special import expit

from . import forest as forest_mod
from .areas import CensusFrame, area_proportions
from .forest import ForestConfig
from .gmerf import GmerfModel, fit
from .parallel import parallel_starmap

_NS_REPLICATE = 0xB0


@dataclass(frozen=True)
class BootstrapConfig:
    n_replicates: int = 200
    seed: int = 0
    refit_forest: Optional[ForestConfig] = None  # cheaper-refit override
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_replicates < 2:
            raise ValueError("n_replicates must be >= 2")


@dataclass
class BootstrapResult:
    """Per-area MSE plus the replicate-level draws behind it.

    ``mu_hat_reps`` / ``mu_true_reps`` are (n_success, D) matrices aligned
    with ``area_ids``; ``mse`` is their mean squared difference by column.
    """

    area_ids: list
    mse: np.ndarray
    mu_hat_reps: np.ndarray
    mu_true_reps: np.ndarray
    nu_reps: np.ndarray
    n_failed: int
    failures: list

    def mse_by_area(self) -> dict:
        return {a: float(m) for a, m in zip(self.area_ids, self.mse)}


def _replicate_seed(seed: int, b: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(_NS_REPLICATE, b))


def _refit_and_predict(y_boot, census: CensusFrame, rows, config) -> np.ndarray:
    """Steps (d)-(e): refit the full model on the bootstrap sample and return
    its estimate for every census area (fixed part only where unsampled)."""
    model = fit(y_boot[rows], census.features[rows], census.area[rows], config)
    estimates = area_proportions(model, census)
    return np.array([e.mu_hat for e in estimates])


def _run_replicate(
    rep_ss,
    fhat,
    sigma2_nu,
    census,
    sample_rows_by_area,
    refit_config,
):
    # stateless child derivation keeps this function pure in rep_ss
    draw_ss = np.random.SeedSequence(
        entropy=rep_ss.entropy, spawn_key=tuple(rep_ss.spawn_key) + (0,)
    )
    forest_ss = np.random.SeedSequence(
        entropy=rep_ss.entropy, spawn_key=tuple(rep_ss.spawn_key) + (1,)
    )
    rng = np.random.default_rng(draw_ss)
    d = census.area_ids.shape[0]
    nu_b = rng.normal(0.0, math.sqrt(sigma2_nu), size=d)
    prob = expit(fhat + nu_b[census.area_index])
    y_boot = (rng.random(census.n_units) < prob).astype(np.int64)
    mu_true = np.bincount(census.area_index, weights=y_boot) / census.counts

    rows = []
    for aid in sorted(sample_rows_by_area):
        area_rows = np.flatnonzero(census.area == aid)
        n_i = len(sample_rows_by_area[aid])
        rows.append(rng.choice(area_rows, size=n_i, replace=False))
    rows = np.concatenate(rows)

    cfg = replace(
        refit_config,
        forest=replace(refit_config.forest, seed=int(forest_ss.generate_state(1)[0])),
    )
    try:
        mu_hat = _refit_and_predict(y_boot, census, rows, cfg)
    except Exception as exc:  # refit failures are recorded, not fatal per se
        return None, mu_true, nu_b, f"{type(exc).__name__}: {exc}"
    return mu_hat, mu_true, nu_b, None


def mse_parametric(
    model: GmerfModel,
    census: CensusFrame,
    sample_index: Mapping,
    cfg: BootstrapConfig,
) -> BootstrapResult:
    """Parametric bootstrap MSE of the area proportions.

    ``sample_index`` maps each originally-sampled area to the census row ids
    of its sample; under the redraw design only the per-area counts n_i are
    used.  Fewer than 90% successful replicate refits is an error.
    """
    census_area_ids = set(census.area_ids.tolist())
    for aid in sample_index:
        if aid not in census_area_ids:
            raise ValueError(f"sampled area {aid} not present in census")
    if model.sigma2_nu < 0:
        raise ValueError("model has negative random-effect variance")

    fhat = forest_mod.predict(model.forest, census.features)
    refit_config = model.config
    if cfg.refit_forest is not None:
        refit_config = replace(model.config, forest=cfg.refit_forest)

    tasks = [
        (
            _replicate_seed(cfg.seed, b),
            fhat,
            model.sigma2_nu,
            census,
            dict(sample_index),
            refit_config,
        )
        for b in range(cfg.n_replicates)
    ]
    results = parallel_starmap(_run_replicate, tasks, n_jobs=cfg.n_jobs)

    mu_hats, mu_trues, nus, failures = [], [], [], []
    for mu_hat, mu_true, nu_b, err in results:
        if err is None:
            mu_hats.append(mu_hat)
            mu_trues.append(mu_true)
            nus.append(nu_b)
        else:
            failures.append(err)
    n_success = len(mu_hats)
    if n_success < 0.9 * cfg.n_replicates:
        raise RuntimeError(
            f"bootstrap failed: only {n_success}/{cfg.n_replicates} replicates "
            f"succeeded (first failure: {failures[0] if failures else 'n/a'})"
        )
    mu_hat_reps = np.vstack(mu_hats)
    mu_true_reps = np.vstack(mu_trues)
    return BootstrapResult(
        area_ids=census.area_ids.tolist(),
        mse=np.mean((mu_hat_reps - mu_true_reps) ** 2, axis=0),
        mu_hat_reps=mu_hat_reps,
        mu_true_reps=mu_true_reps,
        nu_reps=np.vstack(nus) if nus else np.empty((0, census.area_ids.shape[0])),
        n_failed=len(failures),
        failures=failures,
    )
