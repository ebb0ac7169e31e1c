"""Model-based simulation: scenario generators, stratified sampling, the
Monte Carlo study driver and its evaluation metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Mapping, Optional, Union

import numpy as np
import pandas as pd
from scipy.special import expit

from . import bootstrap as bootstrap_mod
from .areas import CensusFrame, area_proportions, direct_estimates
from .baseline import cep_area_proportions, fit_glmm_pql
from .bootstrap import BootstrapConfig
from .gmerf import GmerfConfig, fit
from .parallel import parallel_starmap

_NS_STUDY = 0x51

PREDICTOR_TERMS = ("1", "x1", "x2", "x1:x2", "x1^2", "x2^2")


@dataclass(frozen=True)
class NormalLaw:
    mean: float
    sd: float


@dataclass(frozen=True)
class Scenario:
    """Data-generating recipe for one population.

    ``predictor`` maps terms from PREDICTOR_TERMS to coefficients; the latent
    linear predictor is their sum plus an area intercept nu ~ N(0, sigma2_nu),
    and unit outcomes are Bernoulli(expit(eta)).
    """

    name: str
    predictor: Mapping[str, float]
    x1_law: NormalLaw = NormalLaw(0.0, 2.0)
    x2_law: NormalLaw = NormalLaw(0.0, 3.0)
    sigma2_nu: float = 0.1
    n_areas: int = 50
    area_size: int = 1000
    allocation: tuple = ()

    def __post_init__(self):
        bad = set(self.predictor) - set(PREDICTOR_TERMS)
        if bad:
            raise ValueError(f"unknown predictor terms: {sorted(bad)}")
        if self.sigma2_nu < 0:
            raise ValueError("sigma2_nu must be nonnegative")
        alloc = tuple(int(v) for v in self.allocation) or default_allocation(
            self.n_areas
        )
        if len(alloc) != self.n_areas:
            raise ValueError("allocation length must equal n_areas")
        if any(v < 1 for v in alloc):
            raise ValueError("allocation entries must be >= 1")
        if any(v > self.area_size for v in alloc):
            raise ValueError("allocation entries cannot exceed area_size")
        object.__setattr__(self, "allocation", alloc)

    @property
    def n_sample(self) -> int:
        return sum(self.allocation)

    def eval_predictor(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        c = self.predictor
        out = np.full(x1.shape, float(c.get("1", 0.0)))
        if "x1" in c:
            out += c["x1"] * x1
        if "x2" in c:
            out += c["x2"] * x2
        if "x1:x2" in c:
            out += c["x1:x2"] * x1 * x2
        if "x1^2" in c:
            out += c["x1^2"] * x1**2
        if "x2^2" in c:
            out += c["x2^2"] * x2**2
        return out

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "predictor": dict(self.predictor),
            "x1_law": {"mean": self.x1_law.mean, "sd": self.x1_law.sd},
            "x2_law": {"mean": self.x2_law.mean, "sd": self.x2_law.sd},
            "sigma2_nu": self.sigma2_nu,
            "n_areas": self.n_areas,
            "area_size": self.area_size,
            "allocation": list(self.allocation),
        }


def scenario_from_json(obj: Union[dict, str]) -> Scenario:
    if isinstance(obj, str):
        obj = json.loads(obj)
    return Scenario(
        name=obj["name"],
        predictor={k: float(v) for k, v in obj["predictor"].items()},
        x1_law=NormalLaw(**obj.get("x1_law", {"mean": 0.0, "sd": 2.0})),
        x2_law=NormalLaw(**obj.get("x2_law", {"mean": 0.0, "sd": 3.0})),
        sigma2_nu=float(obj.get("sigma2_nu", 0.1)),
        n_areas=int(obj.get("n_areas", 50)),
        area_size=int(obj.get("area_size", 1000)),
        allocation=tuple(obj.get("allocation", ())),
    )


def default_allocation(n_areas: int = 50) -> tuple:
    """The shipped per-area sample sizes: 50 areas, sum 687, range 1..28,
    median 13."""
    payload = json.loads(
        resources.files("saeforest.data").joinpath("default_allocation.json").read_text()
    )
    alloc = tuple(payload["allocation"])
    if n_areas != len(alloc):
        raise ValueError(f"default allocation is defined for {len(alloc)} areas")
    return alloc


def normal_small() -> Scenario:
    return Scenario("normal-small", {"1": 0.5, "x1": -0.8, "x2": -0.6}, sigma2_nu=0.1)


def interaction_small() -> Scenario:
    return Scenario("interaction-small", {"1": 1.0, "x1:x2": -1.0, "x1^2": -0.6}, sigma2_nu=0.1)


def normal_large() -> Scenario:
    return Scenario("normal-large", {"1": 0.5, "x1": -0.1, "x2": -0.2}, sigma2_nu=1.0)


def interaction_large() -> Scenario:
    return Scenario("interaction-large", {"1": 1.0, "x1:x2": -1.0, "x1^2": -0.6}, sigma2_nu=1.0)


BUILTIN_SCENARIOS = {
    "normal-small": normal_small,
    "interaction-small": interaction_small,
    "normal-large": normal_large,
    "interaction-large": interaction_large,
}


def vpc(sigma2_nu: float) -> float:
    """Latent-scale intraclass correlation sigma2 / (sigma2 + pi^2/3)."""
    if sigma2_nu < 0:
        raise ValueError("sigma2_nu must be nonnegative")
    return sigma2_nu / (sigma2_nu + math.pi**2 / 3.0)


@dataclass
class Population:
    """One realized population with all latent quantities retained."""

    x: np.ndarray
    area: np.ndarray
    nu: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    y: np.ndarray

    @property
    def n_areas(self) -> int:
        return self.nu.shape[0]

    def area_truth(self) -> np.ndarray:
        """Realized share of y=1 per area (the target of estimation)."""
        return np.bincount(self.area, weights=self.y) / np.bincount(self.area)

    def census(self) -> CensusFrame:
        return CensusFrame(area=self.area, features=self.x)


@dataclass
class SampleData:
    rows: np.ndarray
    y: np.ndarray
    x: np.ndarray
    area: np.ndarray
    index_by_area: dict


def generate_population(s: Scenario, seed) -> Population:
    rng = np.random.default_rng(seed)
    n = s.n_areas * s.area_size
    area = np.repeat(np.arange(s.n_areas), s.area_size)
    x1 = rng.normal(s.x1_law.mean, s.x1_law.sd, size=n)
    x2 = rng.normal(s.x2_law.mean, s.x2_law.sd, size=n)
    nu = rng.normal(0.0, math.sqrt(s.sigma2_nu), size=s.n_areas)
    eta = s.eval_predictor(x1, x2) + nu[area]
    mu = expit(eta)
    y = (rng.random(n) < mu).astype(np.int64)
    return Population(x=np.column_stack([x1, x2]), area=area, nu=nu, eta=eta, mu=mu, y=y)


def draw_sample(population: Population, allocation, seed) -> SampleData:
    """Stratified simple random sampling without replacement, areas as strata."""
    rng = np.random.default_rng(seed)
    index_by_area = {}
    rows = []
    for a, n_i in enumerate(allocation):
        area_rows = np.flatnonzero(population.area == a)
        chosen = np.sort(rng.choice(area_rows, size=n_i, replace=False))
        index_by_area[a] = chosen
        rows.append(chosen)
    rows = np.concatenate(rows)
    return SampleData(
        rows=rows,
        y=population.y[rows],
        x=population.x[rows],
        area=population.area[rows],
        index_by_area=index_by_area,
    )


@dataclass
class ReplicateContext:
    """Everything one method invocation sees for one simulation replicate."""

    population: Population
    sample: SampleData
    seed: np.random.SeedSequence
    bootstrap_b: int
    gmerf_config: GmerfConfig


@dataclass
class MethodResult:
    mu_hat: dict
    mse: Optional[dict] = None


def _gmerf_method(ctx: ReplicateContext) -> MethodResult:
    forest_ss, boot_ss = ctx.seed.spawn(2)
    cfg = replace(
        ctx.gmerf_config,
        forest=replace(ctx.gmerf_config.forest, seed=int(forest_ss.generate_state(1)[0])),
    )
    model = fit(ctx.sample.y, ctx.sample.x, ctx.sample.area, cfg)
    census = ctx.population.census()
    estimates = area_proportions(model, census)
    mse = None
    if ctx.bootstrap_b:
        res = bootstrap_mod.mse_parametric(
            model,
            census,
            ctx.sample.index_by_area,
            BootstrapConfig(
                n_replicates=ctx.bootstrap_b, seed=int(boot_ss.generate_state(1)[0])
            ),
        )
        mse = res.mse_by_area()
    return MethodResult(mu_hat={e.area_id: e.mu_hat for e in estimates}, mse=mse)


def _cep_method(ctx: ReplicateContext) -> MethodResult:
    model = fit_glmm_pql(ctx.sample.y, ctx.sample.x, ctx.sample.area, ctx.gmerf_config)
    estimates = cep_area_proportions(model, ctx.population.census())
    return MethodResult(mu_hat={e.area_id: e.mu_hat for e in estimates})


def _direct_method(ctx: ReplicateContext) -> MethodResult:
    estimates = direct_estimates(ctx.sample.y, ctx.sample.area)
    return MethodResult(mu_hat={e.area_id: e.mu_hat for e in estimates})


METHOD_REGISTRY: dict = {
    "gmerf": _gmerf_method,
    "cep": _cep_method,
    "direct": _direct_method,
}


@dataclass
class MetricsTable:
    """Per-area, per-method quality metrics over a Monte Carlo study.

    ``per_area`` columns: method, area_id, rb, rrmse, rb_rmse, rrmse_rmse
    (the latter two only when a method produced MSE estimates).  Summaries
    are recomputed from the rows, never stored.
    """

    per_area: pd.DataFrame
    n_replicates: int
    failures: dict = field(default_factory=dict)

    def summary(self) -> pd.DataFrame:
        metrics = ["rb", "rrmse", "rb_rmse", "rrmse_rmse"]
        return self.per_area.groupby("method")[metrics].agg(["median", "mean"])


def _run_replicate_sim(scenario, rep_ss, methods, bootstrap_b, gmerf_config):
    pop_ss, sample_ss, *method_ss = rep_ss.spawn(2 + len(methods))
    population = generate_population(scenario, pop_ss)
    sample = draw_sample(population, scenario.allocation, sample_ss)
    truth = population.area_truth()
    out = {}
    for (name, method), mss in zip(sorted(methods.items()), method_ss):
        ctx = ReplicateContext(
            population=population,
            sample=sample,
            seed=mss,
            bootstrap_b=bootstrap_b,
            gmerf_config=gmerf_config,
        )
        try:
            out[name] = method(ctx)
        except Exception as exc:
            out[name] = f"{type(exc).__name__}: {exc}"
    return truth, out


def run_study(
    scenario: Scenario,
    n_replicates: int,
    methods,
    bootstrap_b: int = 0,
    seed: int = 0,
    gmerf_config: Optional[GmerfConfig] = None,
    n_jobs: int = 1,
    max_failure_rate: float = 0.05,
) -> MetricsTable:
    """Monte Carlo study: regenerate the population each replicate, draw the
    stratified sample, run every method over all areas and score RB / RRMSE
    (and RB-RMSE / RRMSE-RMSE when bootstrap MSEs are produced).

    ``methods`` is an iterable of registry names or a mapping name ->
    callable(ReplicateContext) -> MethodResult.  A method failing on more
    than ``max_failure_rate`` of replicates aborts the study.
    """
    if isinstance(methods, Mapping):
        methods = dict(methods)
    else:
        methods = {name: METHOD_REGISTRY[name] for name in methods}
    if not methods:
        raise ValueError("no methods selected")
    gmerf_config = gmerf_config or GmerfConfig()

    tasks = [
        (
            scenario,
            np.random.SeedSequence(entropy=seed, spawn_key=(_NS_STUDY, m)),
            methods,
            bootstrap_b,
            gmerf_config,
        )
        for m in range(n_replicates)
    ]
    results = parallel_starmap(_run_replicate_sim, tasks, n_jobs=n_jobs)

    d = scenario.n_areas
    truth = np.vstack([t for t, _ in results])
    rows = []
    failures = {}
    for name in sorted(methods):
        oks = [m for m in range(n_replicates) if isinstance(results[m][1][name], MethodResult)]
        failed = [
            (m, results[m][1][name]) for m in range(n_replicates) if m not in set(oks)
        ]
        failures[name] = [f"replicate {m}: {msg}" for m, msg in failed]
        if len(failed) > max_failure_rate * n_replicates:
            raise RuntimeError(
                f"method '{name}' failed on {len(failed)}/{n_replicates} replicates; "
                f"first: {failures[name][0]}"
            )
        mu_hat = np.full((len(oks), d), np.nan)
        mse_est = np.full((len(oks), d), np.nan)
        has_mse = False
        for r, m in enumerate(oks):
            res = results[m][1][name]
            for a, v in res.mu_hat.items():
                mu_hat[r, a] = v
            if res.mse is not None:
                has_mse = True
                for a, v in res.mse.items():
                    mse_est[r, a] = v
        mu_true = truth[oks]
        err = mu_hat - mu_true
        rb = np.mean(err / mu_true, axis=0)
        rmse_emp = np.sqrt(np.mean(err**2, axis=0))
        rrmse = rmse_emp / np.mean(mu_true, axis=0)
        if has_mse:
            rb_rmse = (np.sqrt(np.mean(mse_est, axis=0)) - rmse_emp) / rmse_emp
            rrmse_rmse = (
                np.sqrt(np.mean((np.sqrt(mse_est) - rmse_emp) ** 2, axis=0)) / rmse_emp
            )
        else:
            rb_rmse = np.full(d, np.nan)
            rrmse_rmse = np.full(d, np.nan)
        for a in range(d):
            rows.append(
                {
                    "method": name,
                    "area_id": a,
                    "rb": rb[a],
                    "rrmse": rrmse[a],
                    "rb_rmse": rb_rmse[a],
                    "rrmse_rmse": rrmse_rmse[a],
                }
            )
    return MetricsTable(
        per_area=pd.DataFrame(rows), n_replicates=n_replicates, failures=failures
    )
