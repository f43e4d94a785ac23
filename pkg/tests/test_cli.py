import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from dasgan.cli import main
from dasgan.data import Domain, LabelMask, save_mask, save_patch
from dasgan.synth import SynthConfig, generate_a

runner = CliRunner()


def _run(args, **kwargs):
    return runner.invoke(main, args, catch_exceptions=False, **kwargs)


def _dir_digest(root: Path) -> dict:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


def _synth(tmp_path, name="data", **flags) -> Path:
    out = tmp_path / name
    args = ["synth", "--out", str(out), "--n-train-a", "6", "--n-train-b", "6",
            "--n-test", "2", "--n-validation", "2", "--patch-size", "32"]
    for key, value in flags.items():
        args += [f"--{key.replace('_', '-')}", str(value)]
    result = _run(args)
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope="module")
def train_run(tmp_path_factory):
    """One tiny end-to-end training run shared by the CLI tests."""
    tmp_path = tmp_path_factory.mktemp("cli-train")
    data_dir = _synth(tmp_path)
    out = tmp_path / "run"
    spec_file = tmp_path / "config.json"
    spec_file.write_text(json.dumps({
        "gen_spec": {"base_filters": 6, "num_resnet_blocks": 1, "attention_reduction": 2},
        "disc_spec": {"base_filters": 6, "num_resnet_blocks": 1, "attention_reduction": 2},
    }))
    result = _run(["train", "--mode", "dasgan", "--data", str(data_dir),
                   "--out", str(out), "--config", str(spec_file),
                   "--iterations", "4", "--checkpoint-every", "4", "--batch-size", "2"])
    assert result.exit_code == 0, result.output
    return data_dir, out


class TestSynthCommand:
    def test_byte_identical_reruns(self, tmp_path):
        d1 = _synth(tmp_path, "d1", seed=7)
        d2 = _synth(tmp_path, "d2", seed=7)
        assert _dir_digest(d1) == _dir_digest(d2)

    def test_different_seed_differs(self, tmp_path):
        d1 = _synth(tmp_path, "d1", seed=7)
        d2 = _synth(tmp_path, "d2", seed=8)
        assert _dir_digest(d1) != _dir_digest(d2)

    def test_run_dir_schema(self, tmp_path):
        out = _synth(tmp_path)
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["format_version"] == 1
        for entry in manifest["outputs"]:
            assert (out / entry).exists()
        assert (out / "config.json").exists()

    def test_out_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DASGAN_OUT_ROOT", str(tmp_path / "root"))
        result = _run(["synth", "--n-train-a", "2", "--n-train-b", "2",
                       "--n-test", "1", "--n-validation", "1", "--patch-size", "32"])
        assert result.exit_code == 0
        assert (tmp_path / "root" / "synth" / "manifest.csv").exists()

    def test_no_out_and_no_env_is_usage_error(self, monkeypatch):
        monkeypatch.delenv("DASGAN_OUT_ROOT", raising=False)
        result = runner.invoke(main, ["synth"])
        assert result.exit_code == 2

    def test_unknown_flag_exit_2(self):
        result = runner.invoke(main, ["synth", "--bogus"])
        assert result.exit_code == 2


class TestCkSegmentCommand:
    def test_emits_mask_and_variants(self, tmp_path):
        data_dir = _synth(tmp_path)
        out = tmp_path / "ck"
        result = _run(["ck-segment", "--input", str(data_dir / "train_b"),
                       "--out", str(out)])
        assert result.exit_code == 0, result.output
        stems = [p.stem for p in (data_dir / "train_b").glob("*.png")
                 if not p.stem.endswith("_mask")]
        for stem in stems:
            neg = np.asarray(Image.open(out / f"{stem}_neg.png"))
            pos = np.asarray(Image.open(out / f"{stem}_pos.png"))
            assert set(np.unique(neg)) <= {0, 1}
            assert set(np.unique(pos)) <= {0, 2}
            assert (out / f"{stem}_mask.png").exists()


class TestTrainCommand:
    def test_outputs_present(self, train_run):
        _, out = train_run
        for name in ("training_log.csv", "best.json", "loss_curves.png",
                     "run_manifest.json", "config.json", "train_config.json"):
            assert (out / name).exists(), name
        best = json.loads((out / "best.json").read_text())
        assert Path(best["best_checkpoint"]).exists()
        rows = list(csv.DictReader(open(out / "training_log.csv")))
        assert len(rows) == 4


class TestPredictScoreEvaluate:
    def test_full_report_path(self, train_run, tmp_path):
        data_dir, run_dir = train_run
        best = json.loads((run_dir / "best.json").read_text())["best_checkpoint"]

        pred_out = tmp_path / "pred"
        result = _run(["predict", "--model", best, "--input", str(data_dir / "validation"),
                       "--out", str(pred_out), "--tile", "32", "--overlap", "8"])
        assert result.exit_code == 0, result.output
        preds = list(pred_out.glob("*_pred.png"))
        assert len(preds) == 2
        assert len(list(pred_out.glob("*_overlay.png"))) == 2

        score_out = tmp_path / "score"
        result = _run(["score", "--masks", str(pred_out), "--out", str(score_out)])
        assert result.exit_code == 0, result.output
        rows = list(csv.DictReader(open(score_out / "scores.csv")))
        assert len(rows) == 2

        eval_out = tmp_path / "eval"
        result = _run(["evaluate", "--pred", str(pred_out),
                       "--truth", str(data_dir / "validation"), "--out", str(eval_out)])
        assert result.exit_code == 0, result.output
        for name in ("f1.csv", "concordance.csv", "bins.csv", "f1_bars.png",
                     "concordance_scatter.png", "tc_bins.png", "run_manifest.json"):
            assert (eval_out / name).exists(), name
        manifest = json.loads((eval_out / "run_manifest.json").read_text())
        for entry in manifest["outputs"]:
            assert (eval_out / entry).exists()

    def test_shape_mismatch_exits_1(self, tmp_path):
        pred_dir = tmp_path / "p"
        truth_dir = tmp_path / "t"
        pred_dir.mkdir()
        truth_dir.mkdir()
        save_mask(LabelMask(labels=np.zeros((8, 8), dtype=np.uint8), domain=Domain.A),
                  pred_dir / "x_pred.png")
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[0, 0] = 1
        save_mask(LabelMask(labels=mask, domain=Domain.A), truth_dir / "x_mask.png")
        result = runner.invoke(main, ["evaluate", "--pred", str(pred_dir),
                                      "--truth", str(truth_dir), "--out", str(tmp_path / "o")])
        assert result.exit_code == 1
        assert "error:" in result.output

    def test_score_handles_no_epithelium(self, tmp_path):
        masks = tmp_path / "m"
        masks.mkdir()
        save_mask(LabelMask(labels=np.zeros((4, 4), dtype=np.uint8), domain=Domain.A),
                  masks / "empty_pred.png")
        result = _run(["score", "--masks", str(masks), "--out", str(tmp_path / "s")])
        assert result.exit_code == 0
        rows = list(csv.DictReader(open(tmp_path / "s" / "scores.csv")))
        assert rows[0]["note"] == "no-epithelium"
