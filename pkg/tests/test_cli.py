"""CLI tests: config precedence, determinism of outputs, exit codes, and the
pipeline contracts between subcommands."""

import json
from pathlib import Path

import pytest

from wenlex.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, main
from wenlex.config import Config, dump_toml, load_config

TINY = """
[data]
n_train = 96
n_val = 16
n_test = 16

[pretrain]
epochs = 2

[train]
epochs = 2
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    data = root / "data"
    assert main(["synth-data", "--config", str(cfg), "--out", str(data)]) == EXIT_OK
    pre = root / "pre"
    assert main(["pretrain", "--config", str(cfg), "--data", str(data),
                 "--out", str(pre)]) == EXIT_OK
    db = root / "db.json"
    assert main(["build-db", "--config", str(cfg), "--data", str(data),
                 "--out", str(db)]) == EXIT_OK
    run = root / "run"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--db", str(db),
                 "--classifier", str(pre / "classifier.wnlx"),
                 "--out", str(run)]) == EXIT_OK
    assert main(["generate", "--run", str(run), "--data", str(data)]) == EXIT_OK
    assert main(["evaluate", "--run", str(run), "--data", str(data),
                 "--db", str(db)]) == EXIT_OK
    return root, cfg, data, pre, db, run


class TestSynthData:
    def test_three_splits_and_schema(self, pipeline):
        _, _, data, *_ = pipeline
        for name in ("train.jsonl", "val.jsonl", "test.jsonl", "schema.json"):
            assert (data / name).exists()
        assert len((data / "train.jsonl").read_text().splitlines()) == 96

    def test_same_seed_byte_identical(self, pipeline, tmp_path):
        root, cfg, data, *_ = pipeline
        again = tmp_path / "data2"
        assert main(["synth-data", "--config", str(cfg), "--out", str(again)]) == EXIT_OK
        for name in ("train.jsonl", "val.jsonl", "test.jsonl", "schema.json"):
            assert (again / name).read_bytes() == (data / name).read_bytes()

    def test_seed_flag_changes_targets(self, pipeline, tmp_path):
        _, cfg, data, *_ = pipeline
        other = tmp_path / "data3"
        assert main(["synth-data", "--config", str(cfg), "--seed", "999",
                     "--out", str(other)]) == EXIT_OK
        assert (other / "train.jsonl").read_text() != (data / "train.jsonl").read_text()
        assert (other / "schema.json").read_text() == (data / "schema.json").read_text()

    def test_manifest_written(self, pipeline):
        _, _, data, *_ = pipeline
        manifest = json.loads((data / "manifest.json").read_text())
        assert manifest["command"] == "synth-data"
        assert len(manifest["config_sha256"]) == 64


class TestConfigPrecedence:
    def test_flag_beats_file(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[train]\nseed = 5\n")
        cfg = load_config(path, overrides={"train.seed": 9})
        assert cfg.train.seed == 9

    def test_file_beats_default(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[train]\nepochs = 3\n")
        assert load_config(path).train.epochs == 3

    def test_env_seed_fallback(self, tmp_path):
        cfg = load_config(None, env={"WENLEX_SEED": "100"})
        assert cfg.data.seed == 101
        assert cfg.train.seed == 104

    def test_explicit_seed_beats_env(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[data]\nseed = 77\n")
        cfg = load_config(path, env={"WENLEX_SEED": "100"})
        assert cfg.data.seed == 77
        assert cfg.train.seed == 104  # still env-derived

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[train]\nnot_a_key = 1\n")
        with pytest.raises(ValueError):
            load_config(path)

    def test_toml_roundtrip(self):
        cfg = Config()
        text = dump_toml(cfg)
        assert text == dump_toml(cfg)
        assert "[train]" in text and "mode = \"post_hoc\"" in text


class TestExitCodes:
    def test_missing_artifact_is_3(self, pipeline, tmp_path):
        _, cfg, data, *_ = pipeline
        code = main(["train", "--config", str(cfg), "--data", str(data),
                     "--db", str(tmp_path / "nope.json"),
                     "--classifier", str(tmp_path / "nope.wnlx"),
                     "--out", str(tmp_path / "r")])
        assert code == EXIT_MISSING

    def test_config_error_is_2(self, pipeline, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[nonsense]\nx = 1\n")
        code = main(["synth-data", "--config", str(bad), "--out", str(tmp_path / "d")])
        assert code == EXIT_CONFIG

    def test_generate_without_train_is_3(self, pipeline, tmp_path):
        _, _, data, *_ = pipeline
        code = main(["generate", "--run", str(tmp_path / "norun"), "--data", str(data)])
        assert code == EXIT_MISSING


class TestTrainCommand:
    def test_summary_and_log(self, pipeline):
        *_, run = pipeline
        summary = json.loads((run / "summary.json").read_text())
        assert summary["mode"] == "post_hoc"
        assert summary["classifier_hash_before"] == summary["classifier_hash_after"]
        log = (run / "train_log.csv").read_text().splitlines()
        assert log[0] == "step,lr,plaus,nle_clf,nle_recons,img_clf,sigma1,sigma2,sigma3,sigma4,wall_ms"
        assert len(log) == 13  # 12 steps + header

    def test_row_flags_map_to_config(self, pipeline, tmp_path):
        root, cfg, data, pre, db, _ = pipeline
        out = tmp_path / "row2"
        assert main(["train", "--config", str(cfg), "--data", str(data),
                     "--db", str(db), "--classifier", str(pre / "classifier.wnlx"),
                     "--plaus", "adv", "--epochs", "1", "--out", str(out)]) == EXIT_OK
        snap = (out / "config.toml").read_text()
        assert 'plausibility = "adversarial"' in snap

    def test_idempotent_outputs(self, pipeline, tmp_path):
        root, cfg, data, pre, db, run = pipeline
        again = tmp_path / "run_again"
        assert main(["train", "--config", str(cfg), "--data", str(data), "--db", str(db),
                     "--classifier", str(pre / "classifier.wnlx"),
                     "--out", str(again)]) == EXIT_OK
        assert (again / "checkpoint.wnlx").read_bytes() == (run / "checkpoint.wnlx").read_bytes()

        def strip_wall(text):
            return ["," .join(line.split(",")[:-1]) for line in text.splitlines()]

        assert strip_wall((again / "train_log.csv").read_text()) == \
            strip_wall((run / "train_log.csv").read_text())


class TestEvaluateAndReport:
    def test_metrics_files(self, pipeline):
        *_, run = pipeline
        csv_text = (run / "metrics_test.csv").read_text()
        assert csv_text.splitlines()[0].startswith("clev_macro_f1,")
        assert (run / "metrics_test.txt").exists()
        plots = sorted(p.name for p in (run / "plots").glob("*.svg"))
        assert "faithfulness.svg" in plots and "diversity.svg" in plots

    def test_report_two_runs_and_absent_metric(self, pipeline, tmp_path):
        root, cfg, data, pre, db, run = pipeline
        # fabricate a second evaluated run with an absent metric
        other = tmp_path / "otherrun"
        other.mkdir()
        csv_text = (run / "metrics_test.csv").read_text()
        header, values = csv_text.strip().splitlines()
        cells = values.split(",")
        cells[header.split(",").index("cxbs")] = ""  # absent, not zero
        (other / "metrics_test.csv").write_text(header + "\n" + ",".join(cells) + "\n")
        out = tmp_path / "cmp"
        assert main(["report", "--runs", str(run), str(other), "--out", str(out)]) == EXIT_OK
        table = (out / "comparison.txt").read_text()
        assert "absent" in table
        assert table.splitlines()[0].count("run") >= 1

    def test_report_without_runs_is_3(self, tmp_path):
        assert main(["report", "--runs", str(tmp_path / "none"),
                     "--out", str(tmp_path / "o")]) == EXIT_MISSING


class TestAblate:
    def test_degenerate_single_member(self, pipeline, tmp_path):
        root, cfg, data, pre, db, _ = pipeline
        out = tmp_path / "abl"
        assert main(["ablate", "--config", str(cfg), "--data", str(data),
                     "--classifier", str(pre / "classifier.wnlx"),
                     "--axis", "db_size", "--values", "2", "--seeds", "14",
                     "--out", str(out)]) == EXIT_OK
        lines = (out / "ablation_db_size.csv").read_text().splitlines()
        assert len(lines) == 2
        cells = lines[1].split(",")
        std_cols = [i for i, name in enumerate(lines[0].split(",")) if name.endswith("_std")]
        assert all(cells[i] in ("0.0", "") for i in std_cols)  # single seed: std 0

    def test_bad_axis_is_2(self, pipeline, tmp_path):
        root, cfg, data, pre, *_ = pipeline
        assert main(["ablate", "--config", str(cfg), "--data", str(data),
                     "--classifier", str(pre / "classifier.wnlx"),
                     "--axis", "nonsense", "--values", "1", "--seeds", "1",
                     "--out", str(tmp_path / "x")]) == EXIT_CONFIG
