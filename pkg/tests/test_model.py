import time

import numpy as np
import pytest

from twoatt.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from twoatt.config import TrainConfig
from twoatt.diffcore import ShapeError
from twoatt.heads import Labels, total_loss
from twoatt.model import Model
from twoatt.train import rmsprop_step

SMALL = dict(widths=(3, 4, 5), embed_d=6, rnn_u=4, n_dim=8, n_cat=6)


@pytest.fixture
def images():
    return np.random.default_rng(0).uniform(0, 1, (3, 1, 48, 48)).astype(np.float32)


class TestShapes:
    @pytest.mark.parametrize("mode,present", [
        ("2mt", {"valence", "arousal", "logits"}),
        ("mt", {"valence", "arousal"}),
        ("single_v", {"valence"}),
        ("single_a", {"arousal"}),
    ])
    def test_head_modes(self, images, mode, present):
        preds = Model(TrainConfig(head_mode=mode, **SMALL)).predict(images)
        assert set(preds) == present
        for k in present - {"logits"}:
            assert preds[k].shape == (3,)
            assert np.all(np.abs(preds[k]) < 1)
        if "logits" in preds:
            assert preds["logits"].shape == (3, 7)

    @pytest.mark.parametrize("blocks", [1, 2, 3])
    @pytest.mark.parametrize("attention", ["none", "level1", "level2"])
    def test_every_ablation_point_runs(self, images, blocks, attention):
        cfg = TrainConfig(blocks=blocks, attention_mode=attention, **SMALL)
        model = Model(cfg)
        assert len(model.blocks) == cfg.n_blocks
        assert model.predict(images)["valence"].shape == (3,)

    def test_level1_has_no_fusion(self):
        names = Model(TrainConfig(attention_mode="level1", **SMALL)).named_parameters()
        assert not any(n.startswith("fusion.") for n in names)
        assert any(n.startswith("block2.mask.") for n in names)

    def test_parameter_naming(self):
        names = list(Model(TrainConfig(**SMALL)).named_parameters())
        assert names[0].startswith("backbone.0")
        assert any(n.startswith("block1.trunk.") for n in names)
        assert any(n.startswith("heads.") for n in names)
        assert len(names) == len(set(names))

    def test_wrong_input_size(self):
        with pytest.raises(ShapeError, match="48"):
            Model(TrainConfig(**SMALL)).predict(np.zeros((1, 1, 56, 56), np.float32))

    def test_batch_independence(self, images):
        model = Model(TrainConfig(**SMALL))
        whole = model.predict(images)["valence"]
        one = model.predict(images[1:2])["valence"]
        np.testing.assert_allclose(one[0], whole[1], rtol=1e-5, atol=1e-6)


class TestInit:
    def test_seeded(self):
        a = Model(TrainConfig(**SMALL), seed=5).state_arrays()
        b = Model(TrainConfig(**SMALL), seed=5).state_arrays()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_biases_zero_and_he_scale(self):
        model = Model(TrainConfig(), seed=1)
        params = model.named_parameters()
        for name, p in params.items():
            if name.endswith(".b"):
                assert not p.data.any(), name
        w = params["backbone.1.w"].data
        fan_in = w.shape[1] * w.shape[2] * w.shape[3]
        assert w.std() == pytest.approx(np.sqrt(2 / fan_in), rel=0.15)


class TestCheckpoint:
    def test_forward_bit_exact_after_roundtrip(self, tmp_path, images):
        model = Model(TrainConfig(**SMALL), seed=3)
        save_checkpoint(tmp_path / "m.ckpt", Checkpoint(model, epoch=4))
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert back.epoch == 4 and back.config == model.config
        a, b = model.predict(images), back.model.predict(images)
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()

    def test_save_load_save_identical_bytes(self, tmp_path):
        model = Model(TrainConfig(**SMALL), seed=3)
        opt = {n: np.full(p.shape, 0.5, p.dtype) for n, p in model.named_parameters().items()}
        rng = np.random.default_rng(7)
        save_checkpoint(tmp_path / "a.ckpt", Checkpoint(model, opt, 2, rng.bit_generator.state,
                                                        {"lr": 1e-4, "drops": 1}))
        save_checkpoint(tmp_path / "b.ckpt", load_checkpoint(tmp_path / "a.ckpt"))
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_optimizer_and_rng_restored(self, tmp_path):
        model = Model(TrainConfig(**SMALL), seed=3)
        opt = {n: np.random.default_rng(1).uniform(size=p.shape).astype(p.dtype)
               for n, p in model.named_parameters().items()}
        rng = np.random.default_rng(11)
        rng.random(3)
        save_checkpoint(tmp_path / "c.ckpt", Checkpoint(model, opt, 1, rng.bit_generator.state))
        back = load_checkpoint(tmp_path / "c.ckpt")
        for n in opt:
            np.testing.assert_array_equal(back.optimizer[n], opt[n])
        restored = np.random.default_rng()
        restored.bit_generator.state = back.rng_state
        assert restored.random() == rng.random()

    def test_architecture_mismatch(self, tmp_path):
        model = Model(TrainConfig(**SMALL))
        save_checkpoint(tmp_path / "m.ckpt", Checkpoint(model))
        other = Model(TrainConfig(**{**SMALL, "widths": (3, 4, 6)}))
        arrays = load_checkpoint(tmp_path / "m.ckpt").model.state_arrays()
        with pytest.raises(ShapeError, match="incompatible"):
            other.load_arrays(arrays)

    def test_garbage_file(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"hello world")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.ckpt")


def test_default_training_step_is_fast():
    cfg = TrainConfig()
    model = Model(cfg)
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (16, 1, 48, 48)).astype(np.float32)
    labels = Labels(rng.uniform(-1, 1, 16), rng.uniform(-1, 1, 16), rng.integers(0, 7, 16))
    t0 = time.perf_counter()
    out = model(x)
    loss = total_loss(out.clf_logits, out.valence, out.arousal, labels, cfg.alpha, cfg.beta, cfg.loss, cfg.c)
    loss.backward()
    rmsprop_step(model.named_parameters(), {}, cfg.lr)
    assert time.perf_counter() - t0 < 5.0
