"""Command-line surface: fit / predict / mse / simulate / tune / aggregate.

Options can come from a JSON config file (``--config``); explicit flags
override file values.  Every output carries a JSON sidecar with the
effective configuration, the seed and library versions, so runs can be
replayed exactly.  Errors exit nonzero with a machine-readable JSON line on
stderr.
"""

from __future__ import annotations

import argparse
import json
import pickle
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import dataio
from .areas import area_proportions, attach_mse
from .bootstrap import BootstrapConfig, mse_parametric
from .forest import ForestConfig, TrainingSet, tune_mtry
from .gmerf import GmerfConfig, fit
from .simulation import BUILTIN_SCENARIOS, run_study, scenario_from_json

_NS_CLI_BOOTSTRAP = 0xB5
_NS_CLI_STUDY = 0x5D


@dataclass
class RunConfig:
    """Effective settings of one CLI invocation (recorded in sidecars)."""

    command: str
    seed: int = 0
    out: str = "."
    survey: Optional[str] = None
    census: Optional[str] = None
    model: Optional[str] = None
    mapping: Optional[str] = None
    estimates: Optional[str] = None
    scenario: Optional[str] = None
    methods: tuple = ("gmerf",)
    poverty_line: Optional[float] = None
    poverty_line_fraction: Optional[float] = None
    trees: int = 500
    mtry: Optional[int] = None
    min_node_size: int = 5
    sample_fraction: float = 1.0
    gll_tol: float = 1e-5
    eta_tol: float = 0.01
    max_micro: int = 100
    max_macro: int = 50
    replicates: int = 200
    bootstrap_replicates: int = 0
    refit_trees: Optional[int] = None
    folds: int = 5
    candidates: tuple = ()
    jobs: int = 1

    def gmerf_config(self) -> GmerfConfig:
        return GmerfConfig(
            forest=ForestConfig(
                n_trees=self.trees,
                mtry=self.mtry,
                min_node_size=self.min_node_size,
                sample_fraction=self.sample_fraction,
                seed=self.seed,
            ),
            gll_rel_tol=self.gll_tol,
            eta_rel_tol=self.eta_tol,
            max_micro=self.max_micro,
            max_macro=self.max_macro,
        )

    def threshold_spec(self) -> Optional[dataio.ThresholdSpec]:
        if self.poverty_line is not None:
            return dataio.ThresholdSpec(value=self.poverty_line)
        if self.poverty_line_fraction is not None:
            return dataio.ThresholdSpec(fraction_of_median=self.poverty_line_fraction)
        return None

    def as_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = list(v) if isinstance(v, tuple) else v
        return out


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saeforest",
        description="Area-level proportion estimation from binary survey data "
        "and census covariates.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with option defaults")
        p.add_argument("--out", help="output directory (default: .)")
        p.add_argument("--seed", type=int, help="global seed (default: 0)")

    def model_opts(p):
        p.add_argument("--trees", type=int, help="number of trees (default: 500)")
        p.add_argument("--mtry", type=int, help="split candidates per node")
        p.add_argument("--min-node-size", type=int, dest="min_node_size")
        p.add_argument("--sample-fraction", type=float, dest="sample_fraction")
        p.add_argument("--gll-tol", type=float, dest="gll_tol")
        p.add_argument("--eta-tol", type=float, dest="eta_tol")
        p.add_argument("--max-micro", type=int, dest="max_micro")
        p.add_argument("--max-macro", type=int, dest="max_macro")

    def threshold_opts(p):
        p.add_argument("--poverty-line", type=float, dest="poverty_line")
        p.add_argument(
            "--poverty-line-fraction", type=float, dest="poverty_line_fraction",
            help="threshold as a fraction of median income",
        )

    p = sub.add_parser("fit", help="fit the model and save it")
    common(p)
    model_opts(p)
    threshold_opts(p)
    p.add_argument("--survey")
    p.add_argument("--census")

    p = sub.add_parser("predict", help="area proportions from a saved model")
    common(p)
    p.add_argument("--model")
    p.add_argument("--census")

    p = sub.add_parser("mse", help="parametric bootstrap MSE for a saved model")
    common(p)
    threshold_opts(p)
    p.add_argument("--model")
    p.add_argument("--survey")
    p.add_argument("--census")
    p.add_argument("--replicates", type=int, help="bootstrap replicates (default: 200)")
    p.add_argument("--refit-trees", type=int, dest="refit_trees",
                   help="smaller forest for bootstrap refits")
    p.add_argument("--jobs", type=int, help="parallel workers (default: 1)")

    p = sub.add_parser("simulate", help="run a model-based simulation study")
    common(p)
    model_opts(p)
    p.add_argument("--scenario",
                   help=f"builtin name ({', '.join(sorted(BUILTIN_SCENARIOS))}) "
                   "or a scenario JSON path")
    p.add_argument("--replicates", type=int, help="Monte Carlo replicates (default: 200)")
    p.add_argument("--methods", help="comma-separated: gmerf,cep,direct")
    p.add_argument("--bootstrap-replicates", type=int, dest="bootstrap_replicates")
    p.add_argument("--jobs", type=int, help="parallel workers (default: 1)")

    p = sub.add_parser("tune", help="cross-validate the mtry parameter")
    common(p)
    threshold_opts(p)
    p.add_argument("--survey")
    p.add_argument("--folds", type=int, help="CV folds (default: 5)")
    p.add_argument("--candidates", help="comma-separated mtry values")
    p.add_argument("--trees", type=int, help="trees per CV fit (default: 500)")

    p = sub.add_parser("aggregate", help="aggregate area estimates to districts")
    common(p)
    p.add_argument("--estimates")
    p.add_argument("--mapping")
    return parser


def _merge_config(args: argparse.Namespace) -> RunConfig:
    file_cfg = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            file_cfg = json.load(fh)
    cfg = RunConfig(command=args.command)
    for key in cfg.__dict__:
        if key == "command":
            continue
        cli_val = getattr(args, key, None)
        if key == "methods" and isinstance(cli_val, str):
            cli_val = tuple(m.strip() for m in cli_val.split(",") if m.strip())
        if key == "candidates" and isinstance(cli_val, str):
            cli_val = tuple(int(c) for c in cli_val.split(","))
        if cli_val is not None:
            setattr(cfg, key, cli_val)
        elif key in file_cfg:
            val = file_cfg[key]
            if isinstance(getattr(cfg, key), tuple) or key in ("methods", "candidates"):
                val = tuple(val)
            setattr(cfg, key, val)
    return cfg


def _load_survey_census(cfg: RunConfig):
    survey = dataio.load_survey(cfg.survey, cfg.threshold_spec())
    census = dataio.load_census(cfg.census)
    return survey, dataio.validate_schema(survey, census)


def _cmd_fit(cfg: RunConfig) -> None:
    survey, census = _load_survey_census(cfg)
    model = fit(survey.y, survey.features, survey.area, cfg.gmerf_config())
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "model.pkl", "wb") as fh:
        pickle.dump(
            {
                "model": model,
                "feature_names": survey.feature_names,
                "threshold": survey.threshold,
                "run_config": cfg.as_dict(),
            },
            fh,
        )
    summary = {
        "sigma2_nu": model.sigma2_nu,
        "n_obs": int(survey.n),
        "n_sampled_areas": len(model.area_ids_sampled),
        "macro_iterations": model.trace.n_macro,
        "converged": model.converged,
        "micro_capped": model.trace.micro_capped,
        "resolved_threshold": survey.threshold,
        "oob_fallback_rows": int(model.oob_fallback.sum()),
    }
    summary.update(dataio.build_sidecar(cfg.as_dict(), cfg.seed))
    with open(out / "fit.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"fitted: sigma2_nu={model.sigma2_nu:.6g}, "
          f"areas={len(model.area_ids_sampled)}, saved to {out / 'model.pkl'}")


def _load_model(path):
    with open(path, "rb") as fh:
        bundle = pickle.load(fh)
    return bundle


def _cmd_predict(cfg: RunConfig) -> None:
    bundle = _load_model(cfg.model)
    census = dataio.load_census(cfg.census)
    if census.feature_names != bundle["feature_names"]:
        if set(census.feature_names) != set(bundle["feature_names"]):
            raise ValueError(
                f"census covariates {census.feature_names} do not match the "
                f"model's {bundle['feature_names']}"
            )
        order = [census.feature_names.index(c) for c in bundle["feature_names"]]
        census = dataio.CensusFrame(
            area=census.area,
            features=census.features[:, order],
            feature_names=list(bundle["feature_names"]),
        )
    estimates = area_proportions(bundle["model"], census)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dataio.emit_estimates(
        estimates, out / "estimates.csv", dataio.build_sidecar(cfg.as_dict(), cfg.seed)
    )
    print(f"wrote {out / 'estimates.csv'} ({len(estimates)} areas)")


def _cmd_mse(cfg: RunConfig) -> None:
    bundle = _load_model(cfg.model)
    model = bundle["model"]
    survey, census = _load_survey_census(cfg)
    estimates = area_proportions(model, census)
    # bootstrap redraws samples per area; only the per-area counts matter
    sample_index = {}
    for aid in np.unique(survey.area).tolist():
        rows = np.flatnonzero(census.area == aid)
        n_i = int(np.sum(survey.area == aid))
        sample_index[aid] = rows[:n_i]
    boot_seed = int(
        np.random.SeedSequence(
            entropy=cfg.seed, spawn_key=(_NS_CLI_BOOTSTRAP,)
        ).generate_state(1)[0]
    )
    refit = None
    if cfg.refit_trees is not None:
        refit = ForestConfig(
            n_trees=cfg.refit_trees,
            mtry=cfg.mtry,
            min_node_size=model.config.forest.min_node_size,
            sample_fraction=model.config.forest.sample_fraction,
            seed=boot_seed,
        )
    result = mse_parametric(
        model,
        census,
        sample_index,
        BootstrapConfig(
            n_replicates=cfg.replicates,
            seed=boot_seed,
            refit_forest=refit,
            n_jobs=cfg.jobs,
        ),
    )
    mse = result.mse_by_area()
    estimates = [attach_mse(e, mse[e.area_id]) for e in estimates]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    sidecar = dataio.build_sidecar(cfg.as_dict(), cfg.seed)
    sidecar["bootstrap_failed_replicates"] = result.n_failed
    dataio.emit_estimates(estimates, out / "estimates.csv", sidecar)
    print(f"wrote {out / 'estimates.csv'} with bootstrap MSE "
          f"({cfg.replicates} replicates, {result.n_failed} failed)")


def _cmd_simulate(cfg: RunConfig) -> None:
    if cfg.scenario in BUILTIN_SCENARIOS:
        scenario = BUILTIN_SCENARIOS[cfg.scenario]()
    else:
        with open(cfg.scenario, encoding="utf-8") as fh:
            scenario = scenario_from_json(json.load(fh))
    study_seed = int(
        np.random.SeedSequence(
            entropy=cfg.seed, spawn_key=(_NS_CLI_STUDY,)
        ).generate_state(1)[0]
    )
    metrics = run_study(
        scenario,
        n_replicates=cfg.replicates,
        methods=cfg.methods,
        bootstrap_b=cfg.bootstrap_replicates,
        seed=study_seed,
        gmerf_config=cfg.gmerf_config(),
        n_jobs=cfg.jobs,
    )
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    sidecar = dataio.build_sidecar(cfg.as_dict(), cfg.seed)
    sidecar["scenario"] = scenario.to_json()
    dataio.emit_report(metrics, out / "report.csv", sidecar)
    print(f"wrote {out / 'report.csv'}")
    print(metrics.summary().to_string())


def _cmd_tune(cfg: RunConfig) -> None:
    survey = dataio.load_survey(cfg.survey, cfg.threshold_spec())
    candidates = cfg.candidates or tuple(range(1, survey.features.shape[1] + 1))
    mu0 = np.where(survey.y == 1, 0.75, 0.25)
    w = mu0 * (1 - mu0)
    data = TrainingSet(survey.features, survey.y.astype(float), w)
    best = tune_mtry(
        data,
        folds=cfg.folds,
        candidates=candidates,
        cfg=ForestConfig(n_trees=cfg.trees, seed=cfg.seed),
    )
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"mtry": best, "candidates": list(candidates), "folds": cfg.folds}
    payload.update(dataio.build_sidecar(cfg.as_dict(), cfg.seed))
    with open(out / "tune.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"selected mtry={best}")


def _cmd_aggregate(cfg: RunConfig) -> None:
    from .areas import aggregate

    estimates = dataio.load_estimates(cfg.estimates)
    mapping = dataio.load_mapping(cfg.mapping)
    district = aggregate(estimates, mapping)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dataio.emit_estimates(
        district, out / "district_estimates.csv",
        dataio.build_sidecar(cfg.as_dict(), cfg.seed),
    )
    print(f"wrote {out / 'district_estimates.csv'} ({len(district)} districts)")


_COMMANDS = {
    "fit": _cmd_fit,
    "predict": _cmd_predict,
    "mse": _cmd_mse,
    "simulate": _cmd_simulate,
    "tune": _cmd_tune,
    "aggregate": _cmd_aggregate,
}

_REQUIRED = {
    "fit": ("survey", "census"),
    "predict": ("model", "census"),
    "mse": ("model", "survey", "census"),
    "simulate": ("scenario",),
    "tune": ("survey",),
    "aggregate": ("estimates", "mapping"),
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _merge_config(args)
        missing = [k for k in _REQUIRED[cfg.command] if getattr(cfg, k) is None]
        if missing:
            raise ValueError(
                f"{cfg.command}: missing required option(s) "
                + ", ".join(f"--{m}" for m in missing)
            )
        _COMMANDS[cfg.command](cfg)
    except Exception as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
