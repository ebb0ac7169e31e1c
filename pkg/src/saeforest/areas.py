"""Area-level proportion estimates, direct estimation, aggregation and
classification diagnostics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Any, Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from . import forest as forest_mod
from .gmerf import GmerfModel


@dataclass
class CensusFrame:
    """Unit-level auxiliary data over the whole population."""

    area: np.ndarray
    features: np.ndarray
    feature_names: Optional[list] = None

    def __post_init__(self):
        self.area = np.asarray(self.area)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.area.shape != (self.features.shape[0],):
            raise ValueError("census area and features must be aligned")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("census features contain non-finite values")
        self.area_ids, self.area_index = np.unique(self.area, return_inverse=True)
        self.counts = np.bincount(self.area_index)

    @property
    def n_units(self) -> int:
        return self.features.shape[0]

    def sizes(self) -> dict:
        return {a: int(c) for a, c in zip(self.area_ids.tolist(), self.counts)}


@dataclass
class AreaEstimate:
    """One area's estimated proportion with optional uncertainty."""

    area_id: Any
    mu_hat: float
    n_i: int
    N_i: Optional[int]
    in_sample: bool
    mse: Optional[float] = None
    cv: Optional[float] = None
    flags: tuple = ()


def attach_mse(est: AreaEstimate, mse: float) -> AreaEstimate:
    """Return a copy with MSE and CV = sqrt(mse)/mu_hat filled in."""
    if mse < 0:
        raise ValueError("mse must be nonnegative")
    if est.mu_hat == 0:
        warnings.warn(f"area {est.area_id}: CV undefined at mu_hat=0")
        return replace(est, mse=mse, cv=None, flags=est.flags + ("cv-undefined",))
    return replace(est, mse=mse, cv=float(np.sqrt(mse) / est.mu_hat))


def area_proportions(model: GmerfModel, census: CensusFrame) -> list:
    """Model-based proportion per census area.

    eta_i is the census mean of the forest fixed part plus the area's random
    intercept; out-of-sample areas (no survey units) use the fixed part only.
    The proportion is expit(eta_i).
    """
    if census.features.shape[1] != model.forest.n_features:
        raise ValueError(
            f"census has {census.features.shape[1]} covariates, model expects "
            f"{model.forest.n_features}"
        )
    fhat = forest_mod.predict(model.forest, census.features)
    fbar = np.bincount(census.area_index, weights=fhat) / census.counts
    out = []
    for k, aid in enumerate(census.area_ids.tolist()):
        if census.counts[k] == 0:
            warnings.warn(f"area {aid}: zero census rows, skipped")
            continue
        in_sample = aid in model.area_ids_sampled
        eta = float(fbar[k]) + (model.nu_hat[aid] if in_sample else 0.0)
        out.append(
            AreaEstimate(
                area_id=aid,
                mu_hat=float(expit(eta)),
                n_i=model.n_by_area.get(aid, 0),
                N_i=int(census.counts[k]),
                in_sample=in_sample,
            )
        )
    return out


def direct_estimates(y, area, census: Optional[CensusFrame] = None) -> list:
    """Design-free area estimates: the sample mean of y per sampled area."""
    y = np.asarray(y, dtype=np.float64)
    area = np.asarray(area)
    if y.shape != area.shape:
        raise ValueError("y and area must be aligned")
    ids, inv = np.unique(area, return_inverse=True)
    counts = np.bincount(inv)
    means = np.bincount(inv, weights=y) / counts
    sizes = census.sizes() if census is not None else {}
    return [
        AreaEstimate(
            area_id=aid,
            mu_hat=float(m),
            n_i=int(c),
            N_i=sizes.get(aid),
            in_sample=True,
        )
        for aid, m, c in zip(ids.tolist(), means, counts)
    ]


def aggregate(estimates: Sequence[AreaEstimate], mapping: Mapping) -> list:
    """Population-size-weighted aggregation of area estimates to districts.

    District value = sum_i (N_i / N_district) * mu_hat_i over member areas.
    """
    by_district = {}
    for est in estimates:
        if est.area_id not in mapping:
            raise ValueError(f"area {est.area_id} missing from district mapping")
        if est.N_i is None:
            raise ValueError(f"area {est.area_id} has no population size N_i")
        by_district.setdefault(mapping[est.area_id], []).append(est)
    out = []
    for did in sorted(by_district):
        members = by_district[did]
        n_total = sum(m.N_i for m in members)
        value = sum(m.N_i * m.mu_hat for m in members) / n_total
        out.append(
            AreaEstimate(
                area_id=did,
                mu_hat=float(value),
                n_i=sum(m.n_i for m in members),
                N_i=int(n_total),
                in_sample=any(m.in_sample for m in members),
            )
        )
    return out


def roc_auc(labels, scores) -> float:
    """Probability that a random positive outscores a random negative, ties
    counting one half (the rank-sum form)."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ValueError("labels and scores must be aligned vectors")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be binary 0/1")
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class CalibrationTable:
    """Equal-count score bins: mean predicted score vs mean observed label."""

    mean_score: np.ndarray
    mean_label: np.ndarray
    count: np.ndarray


def calibration_bins(labels, scores, n_bins: int) -> CalibrationTable:
    """Bin by score quantiles (equal counts) and average scores and labels."""
    labels = np.asarray(labels, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ValueError("labels and scores must be aligned vectors")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    order = np.argsort(scores, kind="stable")
    ms, ml, ct = [], [], []
    for chunk in np.array_split(order, n_bins):
        if chunk.size == 0:
            continue
        ms.append(scores[chunk].mean())
        ml.append(labels[chunk].mean())
        ct.append(chunk.size)
    return CalibrationTable(
        mean_score=np.array(ms), mean_label=np.array(ml), count=np.array(ct)
    )
