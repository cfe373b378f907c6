"""End-to-end CLI runs in temporary directories."""

import numpy as np
import pytest

from diunet.cli import load_config_file, main, write_pgm
from diunet.phantom import read_dataset
from diunet.train import read_fold_reports_csv, write_fold_reports_csv, FoldReport


@pytest.fixture()
def tiny_container(tmp_path):
    path = tmp_path / "data.diud"
    rc = main(["generate", "--count", "10", "--size", "32", "--seed", "7", "--out", str(path)])
    assert rc == 0
    return path


@pytest.fixture()
def prepped_container(tmp_path, tiny_container):
    out = tmp_path / "prepped.diud"
    rc = main(
        ["preprocess", "--data", str(tiny_container), "--out", str(out), "--size", "16"]
    )
    assert rc == 0
    return out


@pytest.fixture()
def trained_model(tmp_path, prepped_container):
    model_path = tmp_path / "model.diun"
    rc = main(
        [
            "train",
            "--data", str(prepped_container),
            "--out-model", str(model_path),
            "--history-csv", str(tmp_path / "history.csv"),
            "--depth", "1",
            "--base-filters", "2",
            "--epochs", "2",
            "--batch-size", "4",
            "--lr", "1e-3",
        ]
    )
    assert rc == 0
    return model_path


class TestGeneratePreprocess:
    def test_generate_writes_container(self, tiny_container):
        samples = read_dataset(tiny_container)
        assert len(samples) == 10
        assert samples[0].image.shape == (32, 32, 4)

    def test_preprocess_resizes_and_windows(self, prepped_container):
        samples = read_dataset(prepped_container)
        assert all(s.image.shape == (16, 16, 4) for s in samples)
        assert all(s.image.min() >= 0.0 and s.image.max() <= 255.0 for s in samples)

    def test_error_exit_code_on_missing_file(self, tmp_path, capsys):
        rc = main(["preprocess", "--data", str(tmp_path / "nope.diud"), "--out", "x", "--size", "16"])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestTrainEvaluateSegment:
    def test_history_csv_written(self, tmp_path, trained_model):
        lines = (tmp_path / "history.csv").read_text().strip().splitlines()
        assert lines[0].startswith("epoch,")
        assert len(lines) == 3

    def test_evaluate_writes_metric_rows(self, tmp_path, trained_model, prepped_container):
        report = tmp_path / "report.csv"
        rc = main(
            [
                "evaluate",
                "--model", str(trained_model),
                "--data", str(prepped_container),
                "--report-csv", str(report),
            ]
        )
        assert rc == 0
        lines = report.read_text().strip().splitlines()
        assert lines[0] == "sample_id,fold,wt_dice,tc_dice,et_dice"
        assert len(lines) - 1 == len(read_dataset(prepped_container))

    def test_segment_writes_pgm_masks(self, tmp_path, trained_model, prepped_container):
        out_dir = tmp_path / "masks"
        rc = main(
            [
                "segment",
                "--model", str(trained_model),
                "--data", str(prepped_container),
                "--out-dir", str(out_dir),
            ]
        )
        assert rc == 0
        pgms = sorted(out_dir.glob("*.pgm"))
        assert len(pgms) == 3 * len(read_dataset(prepped_container))
        raw = pgms[0].read_bytes()
        assert raw.startswith(b"P5\n16 16\n255\n")
        body = raw.split(b"255\n", 1)[1]
        assert set(body) <= {0, 255}
        assert (out_dir / "dice.csv").exists()


class TestConfigFile:
    def test_file_values_used_and_flags_override(self, tmp_path, prepped_container):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[model]\ndepth = 1\nbase_filters = 2\n[train]\nepochs = 2\nbatch_size = 4\nlr = 1e-3\n")
        model_path = tmp_path / "m.diun"
        rc = main(
            [
                "train",
                "--data", str(prepped_container),
                "--config", str(cfg),
                "--out-model", str(model_path),
                "--epochs", "1",
                "--history-csv", str(tmp_path / "h.csv"),
            ]
        )
        assert rc == 0
        lines = (tmp_path / "h.csv").read_text().strip().splitlines()
        assert len(lines) == 2  # flag override: one epoch, not two

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[train]\nepochss = 5\n")
        with pytest.raises(ValueError, match="unknown key"):
            load_config_file(cfg)

    def test_unknown_section_rejected(self, tmp_path):
        cfg = tmp_path / "bad2.ini"
        cfg.write_text("[misc]\nx = 1\n")
        with pytest.raises(ValueError, match="unknown config section"):
            load_config_file(cfg)


class TestStatsCommand:
    def test_decision_table_from_report_csvs(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        base = [FoldReport(i, 0.88 + 0.005 * rng.uniform(), 0.9, 0.7) for i in range(10)]
        better = [FoldReport(r.fold, r.wt + 0.01, r.tc + 0.01, r.et + 0.01) for r in base]
        a_path, b_path = tmp_path / "a.csv", tmp_path / "b.csv"
        write_fold_reports_csv(better, a_path)
        write_fold_reports_csv(base, b_path)
        out = tmp_path / "decision.csv"
        rc = main(
            ["stats", "--reports-a", str(a_path), "--reports-b", str(b_path), "--out", str(out)]
        )
        assert rc == 0
        assert len(out.read_text().strip().splitlines()) == 4
        assert "significant" in capsys.readouterr().out


class TestGradcheckCommand:
    def test_passes_on_tiny_model(self, capsys):
        rc = main(
            ["gradcheck", "--depth", "1", "--base-filters", "2", "--size", "16", "--coords", "10"]
        )
        assert rc == 0
        assert "gradient check passed" in capsys.readouterr().out


class TestParamcountCommand:
    def test_prints_reduction(self, capsys):
        rc = main(["paramcount", "--depth", "3", "--base-filters", "8"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "dilated" in out and "baseline" in out and "reduction" in out


class TestReproCommand:
    def test_mini_repro_outputs(self, tmp_path):
        out_dir = tmp_path / "run"
        argv = [
            "repro",
            "--seed", "11",
            "--out-dir", str(out_dir),
            "--count", "9",
            "--size", "16",
            "--depth", "1",
            "--base-filters", "2",
            "--epochs", "1",
            "--batch", "4",
            "--k", "3",
        ]
        assert main(argv) == 0
        for name in (
            "phantoms.diud",
            "fold_reports_dilated.csv",
            "fold_reports_baseline.csv",
            "metrics_dilated.csv",
            "metrics_baseline.csv",
            "decision.csv",
        ):
            assert (out_dir / name).exists(), name
        reports = read_fold_reports_csv(out_dir / "fold_reports_dilated.csv")
        assert len(reports) == 3


class TestWritePgm:
    def test_round_trip_values(self, tmp_path):
        mask = np.array([[0, 1], [1, 0]], dtype=np.uint8)
        path = tmp_path / "m.pgm"
        write_pgm(mask, path)
        raw = path.read_bytes()
        assert raw == b"P5\n2 2\n255\n" + bytes([0, 255, 255, 0])


class TestGradcheckFailurePath:
    def test_unreachable_tolerance_exits_nonzero(self, capsys):
        rc = main(
            [
                "gradcheck",
                "--depth", "1",
                "--base-filters", "2",
                "--size", "16",
                "--coords", "5",
                "--tolerance", "1e-12",
            ]
        )
        assert rc == 1
        assert "FAILED" in capsys.readouterr().err
