import csv
import json

import numpy as np
import pytest

from saeforest.areas import AreaEstimate
from saeforest.dataio import (
    ThresholdSpec,
    binarize_income,
    build_sidecar,
    emit_estimates,
    load_census,
    load_estimates,
    load_mapping,
    load_survey,
    validate_schema,
    write_sidecar,
)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


class TestBinarizeIncome:
    def test_fraction_of_median_rule(self):
        y, t = binarize_income(
            [1.0, 2.0, 3.0, 4.0, 5.0], ThresholdSpec(fraction_of_median=0.6)
        )
        assert t == pytest.approx(1.8)
        np.testing.assert_array_equal(y, [1, 0, 0, 0, 0])

    def test_infinite_threshold_selects_everyone(self):
        y, _ = binarize_income([3.0, 9.0], ThresholdSpec(value=np.inf))
        np.testing.assert_array_equal(y, [1, 1])

    def test_threshold_below_minimum_selects_nobody(self):
        y, _ = binarize_income([3.0, 9.0], ThresholdSpec(value=1.0))
        np.testing.assert_array_equal(y, [0, 0])

    def test_boundary_income_counts_as_poor(self):
        y, _ = binarize_income([1.8, 1.81], ThresholdSpec(value=1.8))
        np.testing.assert_array_equal(y, [1, 0])

    def test_spec_requires_exactly_one_rule(self):
        with pytest.raises(ValueError):
            ThresholdSpec()
        with pytest.raises(ValueError):
            ThresholdSpec(value=1.0, fraction_of_median=0.6)

    def test_nonfinite_income_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            binarize_income([1.0, np.nan], ThresholdSpec(value=1.0))


class TestLoaders:
    def test_minimal_survey_parses(self, tmp_path):
        p = write_csv(tmp_path / "s.csv", ["area_id", "x1", "y"],
                      [["1", "0.5", "1"], ["2", "-0.25", "0"]])
        survey = load_survey(p)
        assert survey.n == 2
        np.testing.assert_array_equal(survey.area, [1, 2])
        np.testing.assert_array_equal(survey.y, [1, 0])
        assert survey.feature_names == ["x1"]

    def test_missing_area_column(self, tmp_path):
        p = write_csv(tmp_path / "s.csv", ["zone", "x1", "y"], [["1", "0", "1"]])
        with pytest.raises(ValueError, match="area_id"):
            load_survey(p)

    def test_non_binary_y_rejected(self, tmp_path):
        p = write_csv(tmp_path / "s.csv", ["area_id", "x1", "y"],
                      [["1", "0", "2"], ["1", "0", "0"]])
        with pytest.raises(ValueError, match="0/1"):
            load_survey(p)

    def test_malformed_float_names_location(self, tmp_path):
        p = write_csv(tmp_path / "s.csv", ["area_id", "x1", "y"],
                      [["1", "abc", "1"]])
        with pytest.raises(ValueError, match="row 2, column 'x1'"):
            load_survey(p)

    def test_income_without_threshold_rejected(self, tmp_path):
        p = write_csv(tmp_path / "s.csv", ["area_id", "x1", "income"],
                      [["1", "0", "12.5"]])
        with pytest.raises(ValueError, match="threshold"):
            load_survey(p)

    def test_income_binarized_on_load(self, tmp_path):
        p = write_csv(tmp_path / "s.csv", ["area_id", "x1", "income"],
                      [["1", "0", "1"], ["1", "0", "2"], ["1", "0", "3"],
                       ["1", "0", "4"], ["1", "0", "5"]])
        survey = load_survey(p, ThresholdSpec(fraction_of_median=0.6))
        assert survey.threshold == pytest.approx(1.8)
        np.testing.assert_array_equal(survey.y, [1, 0, 0, 0, 0])

    def test_schema_mismatch_names_columns(self, tmp_path):
        sp = write_csv(tmp_path / "s.csv", ["area_id", "x1", "x2", "y"],
                       [["1", "0", "0", "1"], ["1", "1", "1", "0"]])
        cp = write_csv(tmp_path / "c.csv", ["area_id", "x1"],
                       [["1", "0"], ["1", "1"]])
        with pytest.raises(ValueError, match="lacks covariate columns \\['x2'\\]"):
            validate_schema(load_survey(sp), load_census(cp))

    def test_orphan_survey_area_rejected(self, tmp_path):
        sp = write_csv(tmp_path / "s.csv", ["area_id", "x1", "y"],
                       [["1", "0", "1"], ["9", "1", "0"]])
        cp = write_csv(tmp_path / "c.csv", ["area_id", "x1"], [["1", "0"]])
        with pytest.raises(ValueError, match="absent from census: \\[9\\]"):
            validate_schema(load_survey(sp), load_census(cp))

    def test_census_column_order_aligned_to_survey(self, tmp_path):
        sp = write_csv(tmp_path / "s.csv", ["area_id", "x2", "x1", "y"],
                       [["1", "5", "7", "1"], ["1", "6", "8", "0"]])
        cp = write_csv(tmp_path / "c.csv", ["area_id", "x1", "x2"],
                       [["1", "70", "50"]])
        census = validate_schema(load_survey(sp), load_census(cp))
        assert census.feature_names == ["x2", "x1"]
        np.testing.assert_array_equal(census.features, [[50.0, 70.0]])

    def test_mapping_loader(self, tmp_path):
        mp = write_csv(tmp_path / "m.csv", ["area_id", "district_id"],
                       [["1", "d1"], ["2", "d1"]])
        assert load_mapping(mp) == {1: "d1", 2: "d1"}


class TestEmitEstimates:
    def estimates(self):
        return [
            AreaEstimate(area_id=1, mu_hat=0.12345678901234567, n_i=4, N_i=100,
                         in_sample=True, mse=1.5e-4, cv=0.1001),
            AreaEstimate(area_id=2, mu_hat=1 / 3, n_i=0, N_i=250,
                         in_sample=False, mse=None, cv=None,
                         flags=("cv-undefined",)),
        ]

    def test_round_trip_is_exact(self, tmp_path):
        path = tmp_path / "estimates.csv"
        emit_estimates(self.estimates(), path, build_sidecar({"k": 1}, seed=7))
        loaded = load_estimates(path)
        for orig, back in zip(self.estimates(), loaded):
            assert back == orig

    def test_null_cv_serialized_empty(self, tmp_path):
        path = tmp_path / "estimates.csv"
        emit_estimates(self.estimates(), path, build_sidecar({}, seed=0))
        rows = list(csv.DictReader(open(path)))
        assert rows[1]["cv"] == ""
        assert rows[1]["mse"] == ""
        assert rows[1]["cv"] != "0"

    def test_sidecar_records_seed_and_versions(self, tmp_path):
        path = tmp_path / "estimates.csv"
        sidecar = build_sidecar({"trees": 10}, seed=99)
        emit_estimates(self.estimates(), path, sidecar)
        meta = json.load(open(str(path) + ".meta.json"))
        assert meta["seed"] == 99
        assert meta["config"] == {"trees": 10}
        assert "numpy" in meta["versions"]
        assert "saeforest" in meta["versions"]

    def test_write_sidecar_path_convention(self, tmp_path):
        out = write_sidecar(tmp_path / "report.csv", {"a": 1})
        assert out.name == "report.csv.meta.json"
