import csv

import pytest

from twoatt.cli import PRESETS, build_parser, load_config, main
from twoatt.config import TrainConfig

TINY = ["--widths", "2,3,4", "--embed-d", "4", "--rnn-u", "3", "--n-dim", "6", "--n-cat", "5",
        "--batch-size", "4", "--warmup-steps", "0"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--synth", "12", "--epochs", "2", *TINY, "--out", str(out / "train")]) == 0
    return out


class TestConfigPrecedence:
    def test_flag_overrides_file(self, tmp_path):
        (tmp_path / "c.txt").write_text("loss=mse\nepochs=9\nblocks=3\n")
        args = build_parser().parse_args(["train", "--synth", "4", "--config", str(tmp_path / "c.txt"),
                                          "--epochs", "2", "--out", "x"])
        cfg = load_config(args)
        assert (cfg.loss, cfg.epochs, cfg.blocks) == ("mse", 2, 3)

    def test_defaults_without_file(self):
        args = build_parser().parse_args(["train", "--synth", "4", "--out", "x"])
        assert load_config(args) == TrainConfig()

    def test_bad_value_exit_code(self, tmp_path, capsys):
        assert main(["train", "--synth", "4", "--loss", "huber", "--out", str(tmp_path)]) == 2
        assert "loss" in capsys.readouterr().err


class TestCommands:
    def test_train_outputs(self, run_dir):
        names = {p.name for p in (run_dir / "train").iterdir()}
        assert {"metrics.csv", "learning_curve.csv", "best.ckpt", "last.ckpt", "learning_curve.png"} <= names

    def test_eval_writes_metrics(self, run_dir, tmp_path, capsys):
        assert main(["eval", "--checkpoint", str(run_dir / "train/best.ckpt"), "--synth", "6",
                     "--out", str(tmp_path)]) == 0
        assert "ccc_mean" in capsys.readouterr().out
        with open(tmp_path / "metrics.csv", newline="") as fh:
            (row,) = list(csv.DictReader(fh))
        assert row["split"] == "test" and -1 <= float(row["ccc_mean"]) <= 1

    def test_classify(self, run_dir, capsys):
        assert main(["classify", "--checkpoint", str(run_dir / "train/best.ckpt"), "--synth", "6"]) == 0
        acc = float(capsys.readouterr().out.split()[-1])
        assert 0 <= acc <= 1

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--synth", "2"]) == 2

    def test_synth_then_train_from_manifest(self, tmp_path, capsys):
        assert main(["synth", "--n", "10", "--seed", "3", "--out", str(tmp_path / "d")]) == 0
        assert "class counts" in capsys.readouterr().out
        assert main(["train", "--data", str(tmp_path / "d/manifest.csv"), "--epochs", "1", *TINY,
                     "--out", str(tmp_path / "r"), "--no-plots"]) == 0
        assert (tmp_path / "r/metrics.csv").exists()
        assert not (tmp_path / "r/learning_curve.png").exists()

    def test_ablate_grid(self, tmp_path, capsys):
        code = main(["ablate", "--synth", "10", "--grid", "loss=mse,tukey", "--seeds", "0,1", "--epochs", "1",
                     *TINY, "--out", str(tmp_path)])
        assert code == 0
        with open(tmp_path / "ablation.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["config"] for r in rows] == ["loss=mse", "loss=tukey"]
        assert all(r["seeds"] == "2" for r in rows)
        assert (tmp_path / "ablation.png").exists()

    def test_gradcheck_ops(self, capsys):
        assert main(["gradcheck", "--ops-only"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and "conv2d" in out


def test_presets_are_valid_configs():
    for name, points in PRESETS.items():
        for point in points:
            if point.get("head_mode") == "single" or "hidden" in point:
                continue
            TrainConfig().replace(**point)
