"""Weighted regression random forest with out-of-bag prediction.

Trees are resampled with replacement using selection probabilities
proportional to the case weights, and split on weighted variance reduction.
Tree structures are CART regressors from scikit-learn; leaf values are kept
as explicit arrays (the case-weighted mean of in-bag responses per leaf), so
a forest's predictions can be refreshed for a shifted response without
re-growing the trees.  Resampling, seeding, out-of-bag bookkeeping and
tuning live here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from sklearn.tree import DecisionTreeRegressor

# Seed-stream namespaces; per-tree / per-fold streams are derived as
# SeedSequence(entropy=seed, spawn_key=(NAMESPACE, index)) so they are
# counter-based and independent of execution order.
_NS_TREE = 0xF0
_NS_FOLD = 0xCF


def tree_seed_sequence(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(_NS_TREE, index))


@dataclass
class TrainingSet:
    """Features, response and positive case weights for one forest fit."""

    features: np.ndarray
    response: np.ndarray
    case_weights: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.response = np.asarray(self.response, dtype=np.float64)
        self.case_weights = np.asarray(self.case_weights, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("invalid input: features must be a 2-d matrix")
        n, p = self.features.shape
        if n < 2:
            raise ValueError("invalid input: need at least 2 observations")
        if p < 1:
            raise ValueError("invalid input: need at least 1 feature")
        if self.response.shape != (n,) or self.case_weights.shape != (n,):
            raise ValueError("invalid input: response/case_weights length mismatch")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("invalid input: non-finite feature values")
        if not np.all(np.isfinite(self.response)):
            raise ValueError("invalid input: non-finite response values")
        if not np.all(np.isfinite(self.case_weights)) or np.any(self.case_weights <= 0):
            raise ValueError("invalid input: case weights must be positive and finite")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ForestConfig:
    """Forest hyperparameters.

    ``mtry=None`` resolves to ``max(1, floor(sqrt(p)))`` at fit time.
    Identical config and data give a bit-identical forest.
    """

    n_trees: int = 500
    mtry: Optional[int] = None
    min_node_size: int = 5
    sample_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be positive")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.min_node_size < 1:
            raise ValueError("min_node_size must be positive")
        if not (0.0 < self.sample_fraction <= 1.0):
            raise ValueError("sample_fraction must be in (0, 1]")

    def resolve_mtry(self, p: int) -> int:
        m = self.mtry if self.mtry is not None else max(1, int(math.isqrt(p)))
        if m > p:
            raise ValueError(f"mtry={m} exceeds feature count p={p}")
        return m


@dataclass
class Forest:
    """Fitted ensemble: tree structures, per-tree in-bag draws, and explicit
    per-node leaf values (case-weighted in-bag response means)."""

    trees: list
    inbag: list
    leaf_values: list
    n_features: int
    n_train: int
    config: ForestConfig
    response_min: float
    response_max: float

    def inbag_mask(self) -> np.ndarray:
        """Boolean (n_trees, n_train) matrix: True where index was drawn."""
        mask = np.zeros((len(self.trees), self.n_train), dtype=bool)
        for t, idx in enumerate(self.inbag):
            mask[t, np.bincount(idx, minlength=self.n_train) > 0] = True
        return mask


@dataclass
class OobPrediction:
    """Out-of-bag values plus the rows that needed the full-forest fallback."""

    values: np.ndarray
    fallback: np.ndarray


def _as_f32(X: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(X, dtype=np.float32)


def _leaf_values_for(tree, inbag_leaves, w_inbag, y_inbag) -> np.ndarray:
    """Case-weighted mean response of the in-bag rows in each node."""
    n_nodes = tree.tree_.node_count
    sw = np.bincount(inbag_leaves, weights=w_inbag, minlength=n_nodes)
    swy = np.bincount(inbag_leaves, weights=w_inbag * y_inbag, minlength=n_nodes)
    values = np.zeros(n_nodes)
    hit = sw > 0
    values[hit] = swy[hit] / sw[hit]
    return values


def fit_forest(data: TrainingSet, cfg: ForestConfig) -> Forest:
    """Fit a weighted regression forest.

    Each tree draws ``ceil(sample_fraction * n)`` indices with replacement,
    with selection probability ``w_i / sum(w)``, then splits on weighted
    variance reduction with the drawn case weights.
    """
    n, p = data.n, data.p
    if n < cfg.min_node_size:
        raise ValueError(
            f"insufficient data: {n} observations < min_node_size={cfg.min_node_size}"
        )
    mtry = cfg.resolve_mtry(p)
    n_draw = math.ceil(cfg.sample_fraction * n)
    probs = data.case_weights / data.case_weights.sum()
    X32 = _as_f32(data.features)
    y = data.response
    w = data.case_weights

    trees = []
    inbag = []
    leaf_values = []
    for t in range(cfg.n_trees):
        draw_ss, tree_ss = tree_seed_sequence(cfg.seed, t).spawn(2)
        rng = np.random.default_rng(draw_ss)
        idx = rng.choice(n, size=n_draw, replace=True, p=probs)
        tree = DecisionTreeRegressor(
            criterion="squared_error",
            max_features=mtry,
            min_samples_leaf=cfg.min_node_size,
            random_state=int(tree_ss.generate_state(1)[0]),
        )
        tree.fit(X32[idx], y[idx], sample_weight=w[idx], check_input=False)
        trees.append(tree)
        inbag.append(idx)
        leaf_values.append(
            _leaf_values_for(tree, tree.apply(X32[idx], check_input=False), w[idx], y[idx])
        )
    return Forest(
        trees=trees,
        inbag=inbag,
        leaf_values=leaf_values,
        n_features=p,
        n_train=n,
        config=cfg,
        response_min=float(y.min()),
        response_max=float(y.max()),
    )


def apply_forest(forest: Forest, features: np.ndarray) -> np.ndarray:
    """Per-tree leaf indices for each row: (n_trees, m) integer matrix."""
    X32 = _as_f32(features)
    return np.stack([t.apply(X32, check_input=False) for t in forest.trees])


def refresh_leaf_values(
    forest: Forest,
    response: np.ndarray,
    case_weights: np.ndarray,
    train_leaves: np.ndarray,
) -> Forest:
    """Recompute every tree's leaf values for a new response on the same
    structure and in-bag draws.

    Used when the response shifts but the partition should be held fixed;
    ``train_leaves`` comes from :func:`apply_forest` on the training features.
    """
    response = np.asarray(response, dtype=np.float64)
    case_weights = np.asarray(case_weights, dtype=np.float64)
    new_values = []
    for t, tree in enumerate(forest.trees):
        idx = forest.inbag[t]
        new_values.append(
            _leaf_values_for(tree, train_leaves[t][idx], case_weights[idx], response[idx])
        )
    return replace(
        forest,
        leaf_values=new_values,
        response_min=float(response.min()),
        response_max=float(response.max()),
    )


def predict(forest: Forest, features: np.ndarray) -> np.ndarray:
    """Full-forest prediction: mean over all trees' leaf values."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != forest.n_features:
        raise ValueError(
            f"feature matrix has {features.shape[1] if features.ndim == 2 else '?'}"
            f" columns, forest was trained on {forest.n_features}"
        )
    X32 = _as_f32(features)
    out = np.zeros(X32.shape[0], dtype=np.float64)
    for t, tree in enumerate(forest.trees):
        out += forest.leaf_values[t][tree.apply(X32, check_input=False)]
    out /= len(forest.trees)
    return out


def predictions_by_tree(forest: Forest, train_leaves: np.ndarray) -> np.ndarray:
    """(n_trees, n) prediction matrix from precomputed leaf indices."""
    return np.stack(
        [forest.leaf_values[t][train_leaves[t]] for t in range(len(forest.trees))]
    )


def oob_predict(forest: Forest, data: TrainingSet,
                train_leaves: Optional[np.ndarray] = None) -> OobPrediction:
    """Out-of-bag prediction over the training set.

    Row i averages only trees whose in-bag draw excluded i.  Rows that are
    in-bag in every tree fall back to the full-forest prediction and are
    flagged, never an error.
    """
    if data.n != forest.n_train or data.p != forest.n_features:
        raise ValueError("training set does not match the fitted forest")
    if train_leaves is None:
        train_leaves = apply_forest(forest, data.features)
    preds = predictions_by_tree(forest, train_leaves)
    oob_mask = ~forest.inbag_mask()
    counts = oob_mask.sum(axis=0)
    fallback = counts == 0
    values = np.where(
        fallback,
        preds.mean(axis=0),
        (preds * oob_mask).sum(axis=0) / np.maximum(counts, 1),
    )
    return OobPrediction(values=values, fallback=fallback)


def tune_mtry(
    data: TrainingSet,
    folds: int,
    candidates: Sequence[int],
    cfg: ForestConfig,
) -> int:
    """Pick the candidate minimizing weighted K-fold CV squared error.

    Folds are a seeded permutation split; the same per-fold forest seeds are
    used for every candidate so only mtry varies.  Ties go to the smaller
    candidate.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no mtry candidates given")
    for c in candidates:
        if not (1 <= c <= data.p):
            raise ValueError(f"mtry candidate {c} outside [1, {data.p}]")

    perm = np.random.default_rng(
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(_NS_FOLD, 0))
    ).permutation(data.n)
    fold_idx = np.array_split(perm, folds)
    for k, te in enumerate(fold_idx):
        if te.size < 2:
            raise ValueError(f"fold {k} has {te.size} observations (< 2)")

    best_mtry = None
    best_err = np.inf
    for cand in sorted(set(candidates)):
        err = 0.0
        for k, te in enumerate(fold_idx):
            tr = np.setdiff1d(perm, te, assume_unique=True)
            fold_seed = int(
                np.random.SeedSequence(
                    entropy=cfg.seed, spawn_key=(_NS_FOLD, 1 + k)
                ).generate_state(1)[0]
            )
            sub = TrainingSet(
                data.features[tr], data.response[tr], data.case_weights[tr]
            )
            fitted = fit_forest(sub, replace(cfg, mtry=cand, seed=fold_seed))
            pred = predict(fitted, data.features[te])
            err += float(
                np.sum(data.case_weights[te] * (data.response[te] - pred) ** 2)
            )
        if err < best_err:
            best_err = err
            best_mtry = cand
    return best_mtry
