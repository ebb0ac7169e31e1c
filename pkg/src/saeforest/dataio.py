"""CSV/JSON ingestion, validation and report emission.

Loaders are strict: malformed values are rejected with descriptive errors,
never coerced.  Floats are written with Python's shortest round-trip
representation so emitted files reload bit-exactly.
"""

from __future__ import annotations

import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .areas import AreaEstimate, CensusFrame
from .simulation import MetricsTable


@dataclass(frozen=True)
class ThresholdSpec:
    """Poverty-line rule: a literal cutoff or a fraction of the median."""

    value: Optional[float] = None
    fraction_of_median: Optional[float] = None

    def __post_init__(self):
        if (self.value is None) == (self.fraction_of_median is None):
            raise ValueError("give exactly one of value / fraction_of_median")

    def resolve(self, incomes: np.ndarray) -> float:
        if self.value is not None:
            return float(self.value)
        return float(self.fraction_of_median * np.median(incomes))


def binarize_income(income, spec: ThresholdSpec):
    """Classify incomes at or below the resolved threshold as 1.

    Returns ``(y, threshold)`` so the resolved cutoff can be reported.
    """
    income = np.asarray(income, dtype=np.float64)
    if not np.all(np.isfinite(income)):
        raise ValueError("incomes must be finite")
    t = spec.resolve(income)
    return (income <= t).astype(np.int64), t


@dataclass
class SurveyData:
    """Validated unit records from a survey file."""

    area: np.ndarray
    features: np.ndarray
    feature_names: list
    y: np.ndarray
    income: Optional[np.ndarray] = None
    threshold: Optional[float] = None

    @property
    def n(self) -> int:
        return self.features.shape[0]


def _parse_area_column(values: list) -> np.ndarray:
    try:
        return np.array([int(v) for v in values])
    except ValueError:
        return np.array(values)


def _parse_float(value: str, path, row: int, col: str) -> float:
    try:
        out = float(value)
    except ValueError:
        raise ValueError(f"{path}: row {row}, column '{col}': not a number: {value!r}")
    if not np.isfinite(out):
        raise ValueError(f"{path}: row {row}, column '{col}': non-finite value")
    return out


def _read_rows(path) -> tuple:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return header, rows


def _covariate_columns(header: list, path) -> list:
    cols = [h for h in header if h.startswith("x")]
    if not cols:
        raise ValueError(f"{path}: no covariate columns (names starting with 'x')")
    return cols


def load_survey(path, threshold: Optional[ThresholdSpec] = None) -> SurveyData:
    """Load survey CSV: requires ``area_id``, covariates ``x*``, and either a
    binary ``y`` or an ``income`` column plus a threshold spec."""
    header, rows = _read_rows(path)
    if "area_id" not in header:
        raise ValueError(f"{path}: missing required column 'area_id'")
    cov = _covariate_columns(header, path)
    idx = {h: j for j, h in enumerate(header)}
    has_y = "y" in header
    has_income = "income" in header
    if not has_y and not has_income:
        raise ValueError(f"{path}: need a 'y' or 'income' column")
    if not has_y and threshold is None:
        raise ValueError(f"{path}: 'income' column requires a threshold spec")

    area = _parse_area_column([r[idx["area_id"]] for r in rows])
    features = np.array(
        [[_parse_float(r[idx[c]], path, i + 2, c) for c in cov] for i, r in enumerate(rows)]
    )
    income = None
    resolved_t = None
    if has_y:
        raw = [r[idx["y"]] for r in rows]
        bad = [v for v in raw if v not in ("0", "1")]
        if bad:
            raise ValueError(f"{path}: column 'y' must be 0/1, found {bad[0]!r}")
        y = np.array([int(v) for v in raw])
    else:
        income = np.array(
            [_parse_float(r[idx["income"]], path, i + 2, "income") for i, r in enumerate(rows)]
        )
        y, resolved_t = binarize_income(income, threshold)
    return SurveyData(
        area=area,
        features=features,
        feature_names=cov,
        y=y,
        income=income,
        threshold=resolved_t,
    )


def load_census(path) -> CensusFrame:
    """Load census CSV: requires ``area_id`` and covariate columns ``x*``."""
    header, rows = _read_rows(path)
    if "area_id" not in header:
        raise ValueError(f"{path}: missing required column 'area_id'")
    cov = _covariate_columns(header, path)
    idx = {h: j for j, h in enumerate(header)}
    area = _parse_area_column([r[idx["area_id"]] for r in rows])
    features = np.array(
        [[_parse_float(r[idx[c]], path, i + 2, c) for c in cov] for i, r in enumerate(rows)]
    )
    return CensusFrame(area=area, features=features, feature_names=cov)


def validate_schema(survey: SurveyData, census: CensusFrame) -> CensusFrame:
    """Check covariate schema consistency and area coverage.

    Returns the census with columns reordered to the survey's covariate
    order, so feature matrices line up.
    """
    s_cols, c_cols = set(survey.feature_names), set(census.feature_names or [])
    if s_cols != c_cols:
        missing = sorted(s_cols - c_cols)
        extra = sorted(c_cols - s_cols)
        parts = []
        if missing:
            parts.append(f"census lacks covariate columns {missing}")
        if extra:
            parts.append(f"census has extra covariate columns {extra}")
        raise ValueError("schema mismatch: " + "; ".join(parts))
    census_areas = set(census.area_ids.tolist())
    orphans = sorted(a for a in np.unique(survey.area).tolist() if a not in census_areas)
    if orphans:
        raise ValueError(f"areas in survey but absent from census: {orphans}")
    order = [census.feature_names.index(c) for c in survey.feature_names]
    return CensusFrame(
        area=census.area,
        features=census.features[:, order],
        feature_names=list(survey.feature_names),
    )


def load_mapping(path) -> dict:
    """Load an area -> district mapping CSV with columns area_id, district_id."""
    header, rows = _read_rows(path)
    if "area_id" not in header or "district_id" not in header:
        raise ValueError(f"{path}: mapping needs columns 'area_id' and 'district_id'")
    idx = {h: j for j, h in enumerate(header)}
    areas = _parse_area_column([r[idx["area_id"]] for r in rows]).tolist()
    districts = _parse_area_column([r[idx["district_id"]] for r in rows]).tolist()
    return dict(zip(areas, districts))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


ESTIMATE_COLUMNS = ["area_id", "n_i", "N_i", "in_sample", "mu_hat", "mse", "cv", "flags"]


def emit_estimates(estimates: Sequence[AreaEstimate], path, sidecar: dict) -> None:
    """Write estimates.csv plus its JSON sidecar (config, seed, versions)."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ESTIMATE_COLUMNS)
        for e in estimates:
            writer.writerow(
                [
                    _fmt(e.area_id),
                    _fmt(e.n_i),
                    _fmt(e.N_i),
                    _fmt(e.in_sample),
                    _fmt(float(e.mu_hat)),
                    _fmt(None if e.mse is None else float(e.mse)),
                    _fmt(None if e.cv is None else float(e.cv)),
                    ";".join(e.flags),
                ]
            )
    write_sidecar(path, sidecar)


def load_estimates(path) -> list:
    header, rows = _read_rows(path)
    if header != ESTIMATE_COLUMNS:
        raise ValueError(f"{path}: unexpected estimate columns {header}")
    out = []
    for r in rows:
        rec = dict(zip(header, r))
        area = rec["area_id"]
        try:
            area = int(area)
        except ValueError:
            pass
        out.append(
            AreaEstimate(
                area_id=area,
                mu_hat=float(rec["mu_hat"]),
                n_i=int(rec["n_i"]),
                N_i=None if rec["N_i"] == "" else int(rec["N_i"]),
                in_sample=rec["in_sample"] == "true",
                mse=None if rec["mse"] == "" else float(rec["mse"]),
                cv=None if rec["cv"] == "" else float(rec["cv"]),
                flags=tuple(f for f in rec["flags"].split(";") if f),
            )
        )
    return out


REPORT_COLUMNS = ["method", "area_id", "rb", "rrmse", "rb_rmse", "rrmse_rmse"]


def emit_report(metrics: MetricsTable, path, sidecar: dict) -> None:
    """Write the per-area metrics table as report.csv plus its sidecar."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for rec in metrics.per_area.to_dict("records"):
            writer.writerow(
                [
                    rec["method"],
                    _fmt(rec["area_id"]),
                    _fmt(float(rec["rb"])),
                    _fmt(float(rec["rrmse"])),
                    _fmt(None if np.isnan(rec["rb_rmse"]) else float(rec["rb_rmse"])),
                    _fmt(None if np.isnan(rec["rrmse_rmse"]) else float(rec["rrmse_rmse"])),
                ]
            )
    write_sidecar(path, sidecar)


def build_sidecar(config: dict, seed: int) -> dict:
    import sklearn

    import saeforest

    return {
        "config": config,
        "seed": seed,
        "versions": {
            "saeforest": saeforest.__version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": __import__("scipy").__version__,
            "scikit-learn": sklearn.__version__,
        },
    }


def write_sidecar(data_path: Union[str, Path], sidecar: dict) -> Path:
    side_path = Path(str(data_path) + ".meta.json")
    with open(side_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return side_path
