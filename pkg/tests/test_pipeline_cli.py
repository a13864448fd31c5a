"""Pipeline orchestration and CLI contract tests."""

import dataclasses
import json
import shutil
from pathlib import Path

import pandas as pd
import pytest
import yaml

from roamwatch.cli import main
from roamwatch.dialogues import read_ground_truth
from roamwatch.features import FEATURE_NAMES, Branch
from roamwatch.pipeline import (
    CONFIG_VERSION,
    ConfigError,
    PipelineConfig,
    RunPaths,
    StageError,
    build_fleet,
    config_from_dict,
    load_config,
    run_pipeline,
    stage_alarm,
    stage_report,
    stage_score,
    stage_train,
)


def config_dict(**over):
    base = {
        "config_version": 1,
        "seed": 3,
        "train_days": 8,
        "branch": "b2",
        "detector": "iforest",
        "mode": "major-cluster",
        "contamination": 0.05,
        "confidence": 0.99,
        "simulate": {
            "jobs": 1,
            "fleet": {
                "start_day": "2022-09-01",
                "n_days": 11,
                "groups": [
                    {"client_id": "acme", "country": "ES",
                     "device_count": 40, "profile": "c1"},
                    {"client_id": "beta", "country": "AR",
                     "device_count": 60, "profile": "c2"},
                    {"client_id": "ctrl", "country": "FR",
                     "device_count": 50, "profile": "c1"},
                ],
            },
            "scenarios": [
                {"kind": "CANCEL_LOCATION_STORM", "client_id": "acme",
                 "country": "ES", "days": ["2022-09-10"],
                 "affected_fraction": 0.8},
            ],
        },
    }
    base.update(over)
    return base


# ---------------------------------------------------------------- config


class TestConfig:
    def test_minimal_defaults(self):
        cfg = config_from_dict({"config_version": 1})
        assert cfg.preset == "benchmark"
        assert cfg.detector == "iforest"
        assert cfg.contamination == 0.05
        assert cfg.confidence == 0.99
        assert cfg.train_days == 30

    def test_version_required(self):
        with pytest.raises(ConfigError, match="config_version"):
            config_from_dict({})
        with pytest.raises(ConfigError, match="config_version"):
            config_from_dict({"config_version": 99})

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            config_from_dict({"config_version": 1, "detctor": "iforest"})

    def test_unknown_detector_names_valid_set(self):
        with pytest.raises(ConfigError) as exc:
            config_from_dict({"config_version": 1, "detector": "svm"})
        msg = str(exc.value)
        for kind in ("iforest", "tukey", "pcagmm", "fcvae"):
            assert kind in msg

    def test_unknown_mode_and_branch(self):
        with pytest.raises(ConfigError, match="mode"):
            config_from_dict({"config_version": 1, "mode": "mixed"})
        with pytest.raises(ConfigError, match="branch"):
            config_from_dict({"config_version": 1, "branch": "b9"})

    def test_contamination_bounds(self):
        with pytest.raises(ConfigError, match="contamination"):
            config_from_dict({"config_version": 1, "contamination": 0.7})

    def test_preset_and_fleet_conflict(self):
        d = config_dict()
        d["simulate"]["preset"] = "benchmark"
        with pytest.raises(ConfigError, match="either"):
            config_from_dict(d)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="preset"):
            build_fleet("nope", 0)

    def test_unknown_scenario_kind(self):
        d = config_dict()
        d["simulate"]["scenarios"][0]["kind"] = "FLOOD"
        with pytest.raises(ConfigError, match="scenario kind"):
            config_from_dict(d)

    def test_fleet_parses(self):
        cfg = config_from_dict(config_dict())
        assert cfg.fleet is not None
        assert cfg.fleet.seed == 3
        assert len(cfg.fleet.groups) == 3
        assert len(cfg.scenarios) == 1
        assert cfg.scenarios[0].days == ("2022-09-10",)

    def test_custom_profile(self):
        d = config_dict()
        d["simulate"]["fleet"]["profiles"] = {
            "tiny": {
                "mean_dialogues_per_day": 2.0, "map_share": 1.0,
                "sai_2g3g": 1.0, "sai_lte": 0.0, "ul_2g3g": 0.5,
                "ul_lte": 0.0, "cl_2g3g": 0.3, "cl_lte": 0.0,
                "lte_operator_changes": 0.0, "vlr_changes": 0.5,
                "sgsn_changes": 0.1,
            }
        }
        d["simulate"]["fleet"]["groups"][0]["profile"] = "tiny"
        cfg = config_from_dict(d)
        assert "tiny" in cfg.fleet.profiles

    def test_round_trip_through_to_dict(self):
        cfg = config_from_dict(config_dict())
        again = config_from_dict(cfg.to_dict())
        assert again.fleet.groups == cfg.fleet.groups
        assert again.scenarios == cfg.scenarios
        assert again.to_dict() == cfg.to_dict()

    def test_load_config_yaml(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump(config_dict()), encoding="utf-8")
        cfg = load_config(path)
        assert cfg.seed == 3
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "missing.yaml")

    def test_bad_yaml(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("a: [unclosed", encoding="utf-8")
        with pytest.raises(ConfigError, match="YAML"):
            load_config(path)


# ------------------------------------------------------------ full runs


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """One complete b2/iforest/major-cluster run on a 150-device fleet."""
    root = tmp_path_factory.mktemp("pipeline") / "run"
    cfg = config_from_dict(config_dict())
    summary = run_pipeline(cfg, root)
    return cfg, RunPaths(root), summary


class TestRunPipeline:
    def test_all_artifacts_present(self, small_run):
        _, paths, _ = small_run
        assert paths.config_file.exists()
        assert paths.ground_truth.exists()
        assert len(list(paths.logs_dir.glob("*.csv"))) == 11
        assert paths.metrics_file.exists()
        assert paths.train_features.exists()
        assert paths.assignments_file.exists()
        assert paths.context_file.exists()
        assert len(list(paths.models_dir.glob("*.json"))) == 1
        assert len(list(paths.scores_dir.glob("*.csv"))) == 3
        assert paths.alarms_file.exists()
        assert paths.recall_file.exists()
        assert paths.report_file.exists()

    def test_summary_covers_stages(self, small_run):
        _, _, summary = small_run
        assert list(summary) == [
            "simulate", "featurize", "cluster", "train",
            "score", "alarm", "report",
        ]

    def test_train_features_shape(self, small_run):
        _, paths, _ = small_run
        feats = pd.read_csv(paths.train_features, index_col="device_id")
        assert list(feats.columns) == list(FEATURE_NAMES)
        assert len(feats) == 150

    def test_scores_flag_exact_cut(self, small_run):
        _, paths, _ = small_run
        for path in paths.scores_dir.glob("*.csv"):
            frame = pd.read_csv(path, dtype={"flagged": str})
            assert len(frame) == 150
            assert (frame["flagged"] == "true").sum() == 8  # ceil(.05*150)

    def test_report_lists_all_clients(self, small_run):
        _, paths, summary = small_run
        text = summary["report"]
        assert text == paths.report_file.read_text(encoding="utf-8")
        header = text.splitlines()[0]
        for client in ("acme", "beta", "ctrl"):
            assert client in header

    def test_storm_day_alarm(self, small_run):
        """The injected storm dominates the flag budget on its day."""
        _, paths, _ = small_run
        alarms = pd.read_csv(paths.alarms_file)
        storm = alarms[
            (alarms["day"] == "2022-09-10") & (alarms["client_id"] == "acme")
        ]
        assert len(storm) == 1
        assert bool(storm["alarm"].iloc[0]) is True
        ctrl = alarms[alarms["client_id"] == "ctrl"]
        assert not ctrl["alarm"].any()

    def test_recall_matches_set_recomputation(self, small_run):
        """Report recall equals an independent intersection count."""
        _, paths, _ = small_run
        with open(paths.ground_truth, encoding="utf-8") as fh:
            labels = read_ground_truth(fh)
        recalls = pd.read_csv(paths.recall_file, dtype={"day": str})
        for day in paths.score_days():
            frame = pd.read_csv(
                paths.scores_dir / f"{day}.csv", dtype={"flagged": str}
            )
            flagged = set(frame.loc[frame["flagged"] == "true", "device_id"])
            for client in ("acme", "beta", "ctrl"):
                gt = {
                    l.device_id
                    for l in labels
                    if l.day == day and l.client_id == client and l.anomalous
                }
                row = recalls[
                    (recalls["day"] == day) & (recalls["client_id"] == client)
                ]
                assert len(row) == 1
                if not gt:
                    assert pd.isna(row["recall"].iloc[0])
                else:
                    expect = len(flagged & gt) / len(gt)
                    assert row["recall"].iloc[0] == pytest.approx(expect)

    def test_rerun_is_byte_identical(self, small_run, tmp_path):
        cfg, paths, _ = small_run
        again = tmp_path / "again"
        run_pipeline(cfg, again)
        for rel in (
            "report.txt",
            "alarms/alarms.csv",
            "alarms/recall.csv",
            "ground_truth.csv",
            "clusters/assignments.csv",
            "features/train_features.csv",
        ):
            assert (again / rel).read_bytes() == (paths.root / rel).read_bytes()

    def test_stage_rerun_on_existing_artifacts(self, small_run, tmp_path):
        """train/score/alarm/report can rerun standalone on a run dir."""
        cfg, paths, _ = small_run
        copy = tmp_path / "copy"
        shutil.copytree(paths.root, copy)
        cpaths = RunPaths(copy)
        gcfg = dataclasses.replace(cfg, mode="global")
        stage_train(gcfg, cpaths)
        assert cpaths.model_file(gcfg).exists()
        stage_score(gcfg, cpaths)
        stage_alarm(gcfg, cpaths)
        text = stage_report(gcfg, cpaths)
        assert "day" in text.splitlines()[0]

    def test_stage_error_names_stage(self, tmp_path):
        d = config_dict()
        d["simulate"]["scenarios"][0]["client_id"] = "nobody"
        cfg = config_from_dict(d)
        with pytest.raises(StageError, match="simulate") as exc:
            run_pipeline(cfg, tmp_path / "sim_fail")
        assert exc.value.stage == "simulate"
        assert isinstance(exc.value.cause, ValueError)

    def test_run_pipeline_wraps_stage_failures(self, tmp_path):
        bad = config_from_dict(config_dict(train_days=11))  # no test days
        with pytest.raises(StageError, match="featurize"):
            run_pipeline(bad, tmp_path / "bad")
        # partial artifacts from the stages before the failure survive
        assert (tmp_path / "bad" / "ground_truth.csv").exists()


@pytest.fixture(scope="module")
def b1_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline_b1") / "run"
    d = config_dict(branch="b1", detector="tukey", train_days=4)
    d["simulate"]["fleet"]["n_days"] = 6
    d["simulate"]["scenarios"][0]["days"] = ["2022-09-05"]
    cfg = config_from_dict(d)
    summary = run_pipeline(cfg, root)
    return cfg, RunPaths(root), summary


class TestBranch1:
    def test_matrix_store_written(self, b1_run):
        _, paths, _ = b1_run
        assert len(list(paths.matrices_dir.glob("*.csv"))) == 6

    def test_scores_cover_active_devices(self, b1_run):
        _, paths, _ = b1_run
        for day in paths.score_days():
            frame = pd.read_csv(paths.scores_dir / f"{day}.csv")
            assert 0 < len(frame) <= 150
            assert frame["device_id"].is_unique

    def test_report_written(self, b1_run):
        _, paths, _ = b1_run
        assert paths.report_file.exists()


# ---------------------------------------------------------------- CLI


class TestCli:
    @pytest.fixture()
    def config_file(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump(config_dict()), encoding="utf-8")
        return path

    def test_run_command(self, config_file, tmp_path, capsys):
        out = tmp_path / "run"
        rc = main(["run", "--config", str(config_file), "--out", str(out)])
        assert rc == 0
        printed = capsys.readouterr().out
        assert "acme" in printed and "ctrl" in printed
        assert (out / "report.txt").exists()

    def test_stagewise_equals_run(self, config_file, tmp_path, capsys):
        """Driving each stage separately reproduces the one-shot run."""
        whole = tmp_path / "whole"
        staged = tmp_path / "staged"
        assert main(["run", "--config", str(config_file), "--out", str(whole)]) == 0
        for stage in (
            "simulate", "featurize", "cluster", "train", "score", "alarm",
            "report",
        ):
            rc = main(
                [stage, "--config", str(config_file), "--out", str(staged)]
            )
            assert rc == 0, stage
        capsys.readouterr()
        assert (whole / "report.txt").read_bytes() == (
            staged / "report.txt"
        ).read_bytes()
        assert (whole / "alarms" / "alarms.csv").read_bytes() == (
            staged / "alarms" / "alarms.csv"
        ).read_bytes()

    def test_flag_overrides_config(self, config_file, tmp_path, capsys):
        out = tmp_path / "run"
        rc = main(
            [
                "run", "--config", str(config_file), "--out", str(out),
                "--mode", "global", "--detector", "tukey",
            ]
        )
        assert rc == 0
        capsys.readouterr()
        assert (out / "models" / "model_b2_tukey_global.json").exists()
        saved = yaml.safe_load((out / "config.yaml").read_text())
        assert saved["mode"] == "global"
        assert saved["detector"] == "tukey"

    def test_missing_out_dir(self, config_file, capsys):
        rc = main(["run", "--config", str(config_file)])
        assert rc == 1
        assert "run directory" in capsys.readouterr().err

    def test_bad_config_path(self, tmp_path, capsys):
        rc = main(["run", "--config", str(tmp_path / "nope.yaml"),
                   "--out", str(tmp_path / "r")])
        assert rc == 1
        assert "config error" in capsys.readouterr().err

    def test_invalid_choice_exits_1(self):
        with pytest.raises(SystemExit) as exc:
            main(["run", "--detector", "svm", "--out", "/tmp/x"])
        assert exc.value.code == 1

    def test_no_command_exits_1(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 1

    def test_stage_failure_exits_2(self, config_file, tmp_path, capsys):
        rc = main(["featurize", "--config", str(config_file),
                   "--out", str(tmp_path / "empty")])
        assert rc == 2
        err = capsys.readouterr().err
        assert "featurize" in err

    def test_seed_flag_reseeds_fleet(self, config_file, tmp_path, capsys):
        out1 = tmp_path / "s1"
        out2 = tmp_path / "s2"
        assert main(["simulate", "--config", str(config_file),
                     "--out", str(out1), "--seed", "11"]) == 0
        assert main(["simulate", "--config", str(config_file),
                     "--out", str(out2), "--seed", "12"]) == 0
        capsys.readouterr()
        a = (out1 / "logs" / "2022-09-01.csv").read_bytes()
        b = (out2 / "logs" / "2022-09-01.csv").read_bytes()
        assert a != b

    def test_benchmark_preset_accepted(self, capsys):
        """Preset configs pass validation (without running anything)."""
        cfg = config_from_dict({"config_version": 1, "seed": 1})
        spec, scenarios = cfg.resolve_fleet()
        assert sum(g.device_count for g in spec.groups) == 5000
        assert len(scenarios) == 5
