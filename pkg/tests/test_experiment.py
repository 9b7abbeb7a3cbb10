import csv
import dataclasses
import io
import json

import numpy as np
import pytest

from habitreach import experiment as exp
from habitreach.errors import ConfigError, DynamicsError
from habitreach.experiment import (
    ExperimentConfig,
    ExperimentReport,
    csv_header,
    plot_data_csv,
    run_experiment,
)


@pytest.fixture(scope="module")
def small_config():
    return ExperimentConfig(seed=4, library_count=12, target_count=4, n_max=6, rounds=2)


@pytest.fixture(scope="module")
def small_report(short_arm, small_config):
    return run_experiment(small_config, model=short_arm)


class TestConfig:
    @pytest.mark.parametrize("field", ["library_count", "target_count", "n_templates"])
    def test_counts_positive(self, field):
        with pytest.raises(ConfigError):
            ExperimentConfig(**{field: 0})

    def test_bad_grid(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(n_min=5, n_max=2)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"rounds": 2, "color": "red"})

    def test_round_trip(self):
        c = ExperimentConfig(seed=3, target_region=[[0.1, 0.6], [0.3, 0.8]], rounds=1)
        assert ExperimentConfig.from_dict(c.to_dict()) == c
        assert c.digest() == ExperimentConfig.from_dict(c.to_dict()).digest()

    def test_region_outside_workspace(self, short_arm):
        c = ExperimentConfig(library_count=5, target_region=[[0.9, 0.9], [1.2, 1.2]])
        with pytest.raises(ConfigError):
            run_experiment(c, model=short_arm)

    def test_region_through_inner_hole(self, arm):
        lopsided = dataclasses.replace(arm, link_lengths=(0.6, 0.4))
        with pytest.raises(ConfigError):
            exp.check_region([[-0.1, -0.1], [0.1, 0.1]], lopsided)
        exp.check_region([[0.3, 0.3], [0.5, 0.5]], lopsided)


class TestReport:
    def test_rows(self, small_report, small_config):
        assert not small_report.partial
        assert len(small_report.stage_rows("plan")) == 4
        assert len(small_report.stage_rows("offline")) == 4
        for r in (1, 2):
            assert len(small_report.stage_rows("online", r)) == 4
            assert len(small_report.stage_rows("online_offline", r)) == 4
        assert small_report.config_digest == small_config.digest()

    def test_means_are_row_means(self, small_report):
        for stage in exp.STAGES:
            for r in {row.round for row in small_report.stage_rows(stage)}:
                rows = small_report.stage_rows(stage, r)
                assert abs(small_report.mean_error(stage, r) - sum(x.error for x in rows) / len(rows)) <= 1e-12

    def test_offline_not_worse(self, small_report):
        assert small_report.mean_error("offline") <= small_report.mean_error("plan")
        for a, b in zip(small_report.stage_rows("plan"), small_report.stage_rows("offline")):
            assert b.error <= a.error

    def test_round_one_uses_stage_two_targets(self, small_report):
        t2 = [r.target for r in small_report.stage_rows("offline")]
        assert [r.target for r in small_report.stage_rows("online", 1)] == t2

    def test_csv_layout(self, small_report):
        rows = list(csv.reader(io.StringIO(small_report.to_csv())))
        assert rows[0] == ["round", "target_x", "target_y", "stage", "actual_x", "actual_y",
                           "w1", "w2", "w3", "w4", "chosen_n", "error"]
        assert rows[0] == csv_header(4)
        assert all(len(r) == 12 for r in rows)
        assert {r[3] for r in rows[1:]} == set(exp.STAGES)
        assert all(r[10] == "" for r in rows[1:] if r[3] in ("plan", "online"))
        assert all(r[10] != "" for r in rows[1:] if r[3] in ("offline", "online_offline"))

    def test_deterministic(self, short_arm, small_config, small_report):
        again = run_experiment(small_config, model=short_arm)
        assert again.to_csv() == small_report.to_csv()
        assert again.to_json() == small_report.to_json()

    def test_json_round_trip(self, small_report):
        back = ExperimentReport.from_dict(json.loads(small_report.to_json()))
        assert back.to_csv() == small_report.to_csv()

    def test_explicit_targets(self, short_arm):
        c = ExperimentConfig(library_count=12, targets=[[0.05, 0.8], [0.1, 0.85]], n_max=2, rounds=0)
        rep = run_experiment(c, model=short_arm)
        assert [r.target for r in rep.stage_rows("plan")] == [(0.05, 0.8), (0.1, 0.85)]
        assert rep.rounds == []

    def test_partial_on_failure(self, short_arm, monkeypatch):
        def boom(*a, **k):
            raise DynamicsError("muscle length went non-positive", 17)
        monkeypatch.setattr(exp, "calibrate_batch", boom)
        rep = run_experiment(ExperimentConfig(library_count=12, target_count=3, rounds=1), model=short_arm)
        assert rep.partial and "step 17" in rep.failure
        assert len(rep.stage_rows("plan")) == 3 and not rep.stage_rows("offline")


class TestPlotData:
    def test_empty_report(self):
        text = plot_data_csv(ExperimentReport("d", 0, 4))
        assert text.strip().split("\n") == [",".join(exp.PLOT_COLUMNS)]

    def test_columns_and_values(self, small_report):
        rows = list(csv.reader(io.StringIO(plot_data_csv(small_report))))
        assert all(len(r) == len(exp.PLOT_COLUMNS) for r in rows)
        means = [r for r in rows if r[0] == "mean"]
        targets = [r for r in rows if r[0] == "target"]
        assert len(targets) == len(small_report.rows)
        for m in means:
            assert float(m[7]) == small_report.mean_error(m[2], int(m[1]))
        for t, row in zip(targets, small_report.rows):
            assert (float(t[3]), float(t[4])) == row.target and float(t[7]) == row.error

    def test_missing_field(self, small_report):
        doc = small_report.to_dict()
        del doc["rows"]
        with pytest.raises(KeyError):
            plot_data_csv(doc)
