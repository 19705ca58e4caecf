import csv

import numpy as np
import pytest

from twoatt.config import TrainConfig
from twoatt.data import synth_dataset
from twoatt.diffcore import ShapeError, Tensor
from twoatt.train import (
    PlateauSchedule,
    ablate,
    classify_eval,
    evaluate,
    expand_grid,
    fmt,
    lr_schedule_step,
    metric_columns,
    parse_grid,
    rmsprop_step,
    split_dataset,
    train,
)

TINY = dict(widths=(2, 3, 4), embed_d=4, rnn_u=3, n_dim=6, n_cat=5, batch_size=4, epochs=2, warmup_steps=0)


@pytest.fixture(scope="module")
def data():
    return synth_dataset(10, seed=2)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestRmsprop:
    def test_single_step_oracle(self):
        p = Tensor(np.array([1.0, -1.0, 0.5]), requires_grad=True)
        p.grad = np.array([2.0, -0.5, 0.0])
        state = {}
        rmsprop_step({"p": p}, state, lr=0.01)
        v = 0.1 * np.array([4.0, 0.25, 0.0])
        np.testing.assert_allclose(state["p"], v)
        np.testing.assert_allclose(p.data, [1 - 0.01 * 2 / np.sqrt(0.4 + 1e-8),
                                            -1 + 0.01 * 0.5 / np.sqrt(0.025 + 1e-8), 0.5])

    def test_second_step_accumulates(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        state = {}
        for _ in range(2):
            p.grad = np.array([1.0])
            rmsprop_step({"p": p}, state, lr=1.0)
        v1, v2 = 0.1, 0.9 * 0.1 + 0.1
        assert state["p"][0] == pytest.approx(v2)
        assert p.data[0] == pytest.approx(-1 / np.sqrt(v1 + 1e-8) - 1 / np.sqrt(v2 + 1e-8))

    def test_no_grad_untouched(self):
        p = Tensor(np.array([3.0]), requires_grad=True)
        rmsprop_step({"p": p}, {}, lr=1.0)
        assert p.data[0] == 3.0

    def test_state_shape_mismatch(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        p.grad = np.ones(3)
        with pytest.raises(ShapeError, match="optimizer state"):
            rmsprop_step({"p": p}, {"p": np.zeros(4)}, lr=1.0)


class TestSchedule:
    def test_two_drops_then_frozen(self):
        losses = [1.0, 0.9, 0.9, 0.9, 0.9, 0.95]
        lrs = [lr_schedule_step(losses[:i], 1e-3) for i in range(1, len(losses) + 1)]
        np.testing.assert_allclose(lrs, [1e-3, 1e-3, 1e-4, 1e-5, 1e-5, 1e-5])

    def test_improvement_below_min_delta_counts_as_plateau(self):
        assert lr_schedule_step([1.0, 1.0 - 5e-5], 1e-3) == pytest.approx(1e-4)

    def test_patience_two(self):
        assert lr_schedule_step([1.0, 1.0], 1e-3, patience=2) == 1e-3
        assert lr_schedule_step([1.0, 1.0, 1.0], 1e-3, patience=2) == pytest.approx(1e-4)

    def test_improvement_resets_counter(self):
        s = PlateauSchedule(1.0, patience=2)
        for loss in (5.0, 5.0, 4.0, 4.0):
            s.update(loss)
        assert s.lr == 1.0 and s.bad_epochs == 1

    def test_empty_history(self):
        with pytest.raises(ValueError):
            lr_schedule_step([], 1e-3)


class TestReporting:
    def test_fmt(self):
        assert fmt(0.1 + 0.2) == "0.3"
        assert fmt(7) == "7"

    def test_single_task_columns(self):
        cols = metric_columns(("arousal",))
        assert "ccc_valence" not in cols and "ccc_arousal" in cols and "ccc_mean" in cols

    def test_split_is_disjoint_and_seeded(self, data):
        a, b = split_dataset(data, 0.3, seed=1)
        assert (len(a), len(b)) == (7, 3)
        a2, _ = split_dataset(data, 0.3, seed=1)
        np.testing.assert_array_equal(a.valence, a2.valence)
        assert not set(a.valence) & set(b.valence)


class TestTrain:
    def test_outputs_written(self, tmp_path, data):
        res = train(TrainConfig(**TINY), data, data, tmp_path)
        for name in ("metrics.csv", "learning_curve.csv", "config.txt", "best.ckpt", "last.ckpt",
                     "learning_curve.png"):
            assert (tmp_path / name).exists(), name
        rows = read_rows(tmp_path / "metrics.csv")
        assert [r["epoch"] for r in rows] == ["1", "2"]
        assert res.best_ccc == pytest.approx(max(float(r["ccc_mean"]) for r in rows), rel=1e-7)
        assert TrainConfig.load(tmp_path / "config.txt") == TrainConfig(**TINY)

    def test_byte_identical_reruns(self, tmp_path, data):
        cfg = TrainConfig(**TINY, seed=4)
        train(cfg, data, data, tmp_path / "a", plots=False)
        train(cfg, data, data, tmp_path / "b", plots=False)
        for name in ("metrics.csv", "learning_curve.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_different_seed_differs(self, tmp_path, data):
        train(TrainConfig(**TINY, seed=0), data, data, tmp_path / "a", plots=False)
        train(TrainConfig(**TINY, seed=1), data, data, tmp_path / "b", plots=False)
        assert (tmp_path / "a/metrics.csv").read_bytes() != (tmp_path / "b/metrics.csv").read_bytes()

    def test_best_checkpoint_matches_returned_model(self, tmp_path, data):
        res = train(TrainConfig(**TINY), data, data, tmp_path, plots=False)
        np.testing.assert_array_equal(evaluate(tmp_path / "best.ckpt", data)["ccc_mean"],
                                      evaluate(res.model, data)["ccc_mean"])

    def test_zero_epochs(self, data):
        res = train(TrainConfig(**{**TINY, "epochs": 0}), data, data)
        assert res.metrics == [] and res.best_params is None

    def test_empty_training_set(self, data):
        with pytest.raises(ValueError, match="empty"):
            train(TrainConfig(**TINY), data.subset(np.array([], int)), data)

    def test_classify_needs_classifier(self, data):
        res = train(TrainConfig(**{**TINY, "head_mode": "mt", "epochs": 1}), data, data)
        with pytest.raises(ValueError, match="classifier"):
            classify_eval(res.model, data)


class TestAblate:
    def test_grid_expansion(self):
        grid = parse_grid("loss=mse,tukey; blocks=1,2,3")
        assert grid == {"loss": ["mse", "tukey"], "blocks": ["1", "2", "3"]}
        points = expand_grid(grid)
        assert len(points) == 6 and points[0] == {"loss": "mse", "blocks": "1"}

    def test_empty_grid(self, tmp_path, data):
        assert expand_grid({}) == []
        assert ablate([], TrainConfig(**TINY), data, data, out_dir=tmp_path) == []
        assert read_rows(tmp_path / "ablation.csv") == []

    @pytest.mark.parametrize("text", ["loss", "dropout=0.1"])
    def test_bad_grid(self, text):
        with pytest.raises(ValueError):
            parse_grid(text)

    def test_failed_config_kept_as_row(self, tmp_path, data):
        points = [{"loss": "mse"}, {"c": "-1"}]
        rows = ablate(points, TrainConfig(**{**TINY, "epochs": 1}), data, data, seeds=[0, 1],
                      out_dir=tmp_path, plots=False)
        assert [r["status"] for r in rows] == ["ok", "failed"]
        csv_rows = read_rows(tmp_path / "ablation.csv")
        assert csv_rows[1]["status"] == "failed" and csv_rows[1]["ccc_mean"] == ""
        assert csv_rows[0]["seeds"] == "2"
        runs = read_rows(tmp_path / "ablation_runs.csv")
        assert len(runs) == 4 and "ConfigError" in runs[-1]["error"]

    def test_single_and_hidden_points(self, data):
        rows = ablate([{"head_mode": "single", "hidden": "8x4"}], TrainConfig(**{**TINY, "epochs": 1}),
                      data, data)
        row = rows[0]
        assert row["status"] == "ok"
        assert row["ccc_mean"] == pytest.approx((row["ccc_valence"] + row["ccc_arousal"]) / 2)
