import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from scipy.special import expit

from saeforest.cli import main


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    """Small coherent survey/census pair with a known signal."""
    rng = np.random.default_rng(314)
    root = tmp_path_factory.mktemp("cli-data")
    d, n_pop, n_i = 5, 50, 8
    area = np.repeat(np.arange(d), n_pop)
    x = rng.normal(size=(d * n_pop, 2))
    eta = 0.3 - 0.9 * x[:, 0] + rng.normal(0, 0.4, d)[area]
    y = (rng.random(d * n_pop) < expit(eta)).astype(int)

    with open(root / "census.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["area_id", "x1", "x2"])
        for i in range(d * n_pop):
            w.writerow([area[i], repr(float(x[i, 0])), repr(float(x[i, 1]))])

    rows = np.concatenate(
        [rng.choice(np.flatnonzero(area == a), n_i, replace=False) for a in range(4)]
    )  # area 4 left out-of-sample
    with open(root / "survey.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["area_id", "x1", "x2", "y"])
        for i in rows:
            w.writerow([area[i], repr(float(x[i, 0])), repr(float(x[i, 1])), y[i]])

    with open(root / "mapping.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["area_id", "district_id"])
        for a in range(d):
            w.writerow([a, f"district-{a // 3}"])
    return root


FAST = ["--trees", "12", "--max-micro", "4", "--max-macro", "2", "--seed", "5"]


class TestCliWorkflow:
    def test_fit_writes_model_and_summary(self, data_dir, tmp_path):
        out = tmp_path / "fit"
        rc = main(["fit", "--survey", str(data_dir / "survey.csv"),
                   "--census", str(data_dir / "census.csv"),
                   "--out", str(out)] + FAST)
        assert rc == 0
        assert (out / "model.pkl").exists()
        summary = json.load(open(out / "fit.json"))
        assert summary["n_sampled_areas"] == 4
        assert summary["seed"] == 5
        assert summary["sigma2_nu"] >= 0

    def test_predict_covers_out_of_sample_area(self, data_dir, tmp_path):
        out = tmp_path / "run"
        main(["fit", "--survey", str(data_dir / "survey.csv"),
              "--census", str(data_dir / "census.csv"), "--out", str(out)] + FAST)
        rc = main(["predict", "--model", str(out / "model.pkl"),
                   "--census", str(data_dir / "census.csv"), "--out", str(out),
                   "--seed", "5"])
        assert rc == 0
        rows = list(csv.DictReader(open(out / "estimates.csv")))
        assert len(rows) == 5
        by_area = {r["area_id"]: r for r in rows}
        assert by_area["4"]["in_sample"] == "false"
        assert by_area["4"]["n_i"] == "0"
        assert by_area["4"]["mse"] == ""
        for r in rows:
            assert 0.0 < float(r["mu_hat"]) < 1.0

    def test_mse_fills_uncertainty_columns(self, data_dir, tmp_path):
        out = tmp_path / "mse"
        main(["fit", "--survey", str(data_dir / "survey.csv"),
              "--census", str(data_dir / "census.csv"), "--out", str(out)] + FAST)
        rc = main(["mse", "--model", str(out / "model.pkl"),
                   "--survey", str(data_dir / "survey.csv"),
                   "--census", str(data_dir / "census.csv"),
                   "--replicates", "4", "--out", str(out), "--seed", "5"])
        assert rc == 0
        rows = list(csv.DictReader(open(out / "estimates.csv")))
        for r in rows:
            assert float(r["mse"]) >= 0
            if r["mu_hat"] != "0.0":
                assert r["cv"] != ""
        meta = json.load(open(str(out / "estimates.csv") + ".meta.json"))
        assert meta["seed"] == 5
        assert meta["bootstrap_failed_replicates"] == 0

    def test_repeated_runs_are_byte_identical(self, data_dir, tmp_path):
        blobs = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            main(["fit", "--survey", str(data_dir / "survey.csv"),
                  "--census", str(data_dir / "census.csv"), "--out", str(out)] + FAST)
            main(["mse", "--model", str(out / "model.pkl"),
                  "--survey", str(data_dir / "survey.csv"),
                  "--census", str(data_dir / "census.csv"),
                  "--replicates", "4", "--out", str(out), "--seed", "5"])
            blobs.append((out / "estimates.csv").read_bytes())
        assert blobs[0] == blobs[1]

    def test_tune_reports_choice(self, data_dir, tmp_path):
        out = tmp_path / "tune"
        rc = main(["tune", "--survey", str(data_dir / "survey.csv"),
                   "--folds", "3", "--candidates", "1,2", "--trees", "10",
                   "--out", str(out), "--seed", "5"])
        assert rc == 0
        payload = json.load(open(out / "tune.json"))
        assert payload["mtry"] in (1, 2)
        assert payload["candidates"] == [1, 2]

    def test_aggregate_to_districts(self, data_dir, tmp_path):
        out = tmp_path / "agg"
        main(["fit", "--survey", str(data_dir / "survey.csv"),
              "--census", str(data_dir / "census.csv"), "--out", str(out)] + FAST)
        main(["predict", "--model", str(out / "model.pkl"),
              "--census", str(data_dir / "census.csv"), "--out", str(out),
              "--seed", "5"])
        rc = main(["aggregate", "--estimates", str(out / "estimates.csv"),
                   "--mapping", str(data_dir / "mapping.csv"), "--out", str(out)])
        assert rc == 0
        rows = list(csv.DictReader(open(out / "district_estimates.csv")))
        assert [r["area_id"] for r in rows] == ["district-0", "district-1"]
        # weighted mean stays inside the member range
        ests = list(csv.DictReader(open(out / "estimates.csv")))
        members = [float(r["mu_hat"]) for r in ests if r["area_id"] in "012"]
        assert min(members) <= float(rows[0]["mu_hat"]) <= max(members)

    def test_simulate_emits_report(self, data_dir, tmp_path):
        out = tmp_path / "sim"
        scenario = {
            "name": "tiny", "predictor": {"1": 0.2, "x1": -0.5},
            "sigma2_nu": 0.1, "n_areas": 4, "area_size": 30,
            "allocation": [5, 5, 5, 5],
        }
        spath = tmp_path / "scenario.json"
        json.dump(scenario, open(spath, "w"))
        rc = main(["simulate", "--scenario", str(spath), "--replicates", "2",
                   "--methods", "direct", "--out", str(out), "--seed", "5"])
        assert rc == 0
        rows = list(csv.DictReader(open(out / "report.csv")))
        assert len(rows) == 4
        assert set(r["method"] for r in rows) == {"direct"}
        meta = json.load(open(str(out / "report.csv") + ".meta.json"))
        assert meta["scenario"]["name"] == "tiny"

    def test_config_file_with_flag_override(self, data_dir, tmp_path):
        out = tmp_path / "cfg"
        cfg = {"survey": str(data_dir / "survey.csv"),
               "census": str(data_dir / "census.csv"),
               "trees": 12, "max_micro": 4, "max_macro": 2, "seed": 5}
        cpath = tmp_path / "run.json"
        json.dump(cfg, open(cpath, "w"))
        rc = main(["fit", "--config", str(cpath), "--survey",
                   str(data_dir / "survey.csv"), "--out", str(out)])
        assert rc == 0
        summary = json.load(open(out / "fit.json"))
        assert summary["config"]["trees"] == 12

    def test_predict_rejects_mismatched_census(self, data_dir, tmp_path):
        out = tmp_path / "m"
        main(["fit", "--survey", str(data_dir / "survey.csv"),
              "--census", str(data_dir / "census.csv"), "--out", str(out)] + FAST)
        bad = tmp_path / "bad_census.csv"
        with open(data_dir / "census.csv") as fh:
            lines = fh.read().splitlines()
        with open(bad, "w") as fh:  # drop the x2 column
            for line in lines:
                fh.write(",".join(line.split(",")[:2]) + "\n")
        rc = main(["predict", "--model", str(out / "model.pkl"),
                   "--census", str(bad), "--out", str(out)])
        assert rc == 1

    def test_run_replayable_from_sidecar_alone(self, data_dir, tmp_path):
        out = tmp_path / "orig"
        main(["fit", "--survey", str(data_dir / "survey.csv"),
              "--census", str(data_dir / "census.csv"), "--out", str(out)] + FAST)
        main(["predict", "--model", str(out / "model.pkl"),
              "--census", str(data_dir / "census.csv"), "--out", str(out),
              "--seed", "5"])
        meta = json.load(open(str(out / "estimates.csv") + ".meta.json"))
        replay_cfg = tmp_path / "replay.json"
        json.dump(meta["config"], open(replay_cfg, "w"))
        replay_out = tmp_path / "replay"
        rc = main(["predict", "--config", str(replay_cfg), "--out", str(replay_out)])
        assert rc == 0
        assert (out / "estimates.csv").read_bytes() == (
            replay_out / "estimates.csv"
        ).read_bytes()

    def test_errors_exit_nonzero_with_json_stderr(self, data_dir, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "saeforest.cli", "fit",
             "--survey", str(data_dir / "census.csv"),  # census lacks y
             "--census", str(data_dir / "census.csv"),
             "--out", str(tmp_path)],
            capture_output=True, text=True,
        )
        assert proc.returncode == 1
        err = json.loads(proc.stderr.strip().splitlines()[-1])
        assert err["error"] == "ValueError"
        assert "y" in err["message"] or "income" in err["message"]
