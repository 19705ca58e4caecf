import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from twoatt.data import (
    CROP,
    FULL,
    UNLABELED,
    Dataset,
    ManifestEntry,
    ManifestError,
    augment,
    center_crop,
    corrupt_labels,
    decode_image,
    export_dataset,
    expression_from_va,
    hflip,
    load_manifest,
    preprocess,
    resize_matrix,
    sample_rng,
    synth_dataset,
    tta_predict,
    write_manifest,
)


@pytest.fixture
def rng():
    return np.random.default_rng(3)


@pytest.fixture(scope="module")
def small():
    return synth_dataset(12, seed=4)


def write_rows(path, rows, header="image_path,valence,arousal,expression"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n", encoding="utf-8")
    return path


class TestResize:
    @pytest.mark.parametrize("n", [1, 5, 56])
    def test_same_size_is_identity(self, n):
        np.testing.assert_allclose(resize_matrix(n, n), np.eye(n), atol=1e-12)

    @settings(max_examples=30)
    @given(st.integers(1, 80), st.integers(1, 80))
    def test_rows_are_partitions_of_unity(self, n_in, n_out):
        a = resize_matrix(n_in, n_out)
        assert a.shape == (n_out, n_in)
        assert np.all(a >= 0)
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)

    def test_downsample_by_two_averages_pairs(self):
        a = resize_matrix(4, 2)
        np.testing.assert_allclose(a, [[0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5]])


class TestPreprocess:
    def test_constant_image(self):
        out = preprocess(np.full((30, 40), 128, np.uint8))
        assert out.shape == (1, FULL, FULL) and out.dtype == np.float32
        np.testing.assert_allclose(out, 128 / 255, rtol=1e-6)

    def test_luma_weights(self):
        red = np.zeros((10, 10, 3), np.uint8)
        red[..., 0] = 255
        np.testing.assert_allclose(preprocess(red), 0.299, rtol=1e-6)

    def test_alpha_channel_ignored(self):
        rgba = np.full((8, 8, 4), 200, np.uint8)
        rgba[..., 3] = 0
        np.testing.assert_allclose(preprocess(rgba), 200 / 255, rtol=1e-6)

    def test_float_input_range(self, rng):
        out = preprocess(rng.uniform(0, 1, (56, 56)))
        assert out.min() >= 0 and out.max() <= 1

    def test_bad_shape(self):
        with pytest.raises(ValueError, match="channel"):
            preprocess(np.zeros((5, 5, 2)))

    def test_undecodable_file(self, tmp_path):
        bad = tmp_path / "x.png"
        bad.write_bytes(b"not a png")
        with pytest.raises(ValueError, match="x.png"):
            decode_image(bad)

    def test_png_roundtrip(self, tmp_path, rng):
        pixels = rng.integers(0, 256, (56, 56), dtype=np.uint8)
        Image.fromarray(pixels).save(tmp_path / "a.png")
        np.testing.assert_allclose(preprocess(decode_image(tmp_path / "a.png"))[0], pixels / 255, atol=1e-6)


class TestAugment:
    def test_fixed_offset_no_flip_is_crop(self, rng):
        img = rng.uniform(0, 1, (1, FULL, FULL))
        out = augment(img, rng, offset=(3, 5), flip=False)
        np.testing.assert_array_equal(out, img[:, 3:3 + CROP, 5:5 + CROP])

    def test_flip_mirrors_columns(self, rng):
        img = rng.uniform(0, 1, (1, FULL, FULL))
        out = augment(img, rng, offset=(0, 0), flip=True)
        np.testing.assert_array_equal(out[0, :, 0], img[0, :CROP, CROP - 1])

    def test_hflip_involution(self, rng):
        img = rng.uniform(0, 1, (1, 5, 7))
        np.testing.assert_array_equal(hflip(hflip(img)), img)

    def test_same_seed_same_view(self, rng):
        img = rng.uniform(0, 1, (1, FULL, FULL))
        a = augment(img, sample_rng(1, 2, 3))
        b = augment(img, sample_rng(1, 2, 3))
        np.testing.assert_array_equal(a, b)
        assert a.shape == (1, CROP, CROP)

    def test_offsets_cover_range(self, rng):
        img = np.arange(FULL * FULL, dtype=float).reshape(1, FULL, FULL)
        tops = set()
        for i in range(300):
            out = augment(img, sample_rng(0, 0, i), flip=False)
            tops.add(int(out[0, 0, 0]) // FULL)
        assert tops == set(range(FULL - CROP + 1))

    def test_wrong_size(self, rng):
        with pytest.raises(ValueError, match="56"):
            augment(np.zeros((1, 48, 48)), rng)


class TestTta:
    def test_averages_center_and_mirror(self, rng):
        imgs = rng.uniform(0, 1, (3, 1, FULL, FULL))

        def predict(x):
            return {"valence": x[:, 0, 0, 0], "arousal": x[:, 0, 0, -1]}

        out = tta_predict(predict, imgs)
        c = center_crop(imgs)
        np.testing.assert_allclose(out["valence"], (c[:, 0, 0, 0] + c[:, 0, 0, -1]) / 2)
        np.testing.assert_allclose(out["valence"], out["arousal"])

    def test_single_image(self, rng):
        img = rng.uniform(0, 1, (1, FULL, FULL))
        out = tta_predict(lambda x: {"v": x.mean(axis=(1, 2, 3))}, img)
        assert np.ndim(out["v"]) == 0
        assert out["v"] == pytest.approx(center_crop(img).mean())

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            tta_predict(lambda x: {}, np.zeros((2, 1, 48, 48)))


class TestManifest:
    def test_roundtrip(self, tmp_path):
        entries = [ManifestEntry("a.png", 0.25, -1.0, 3), ManifestEntry("b.png", 1.0, 0.1, UNLABELED)]
        write_manifest(tmp_path / "m.csv", entries)
        m = load_manifest(tmp_path / "m.csv")
        assert m.entries == entries and not m.errors
        assert m.resolve(m.entries[0]) == tmp_path / "a.png"

    def test_bad_rows_reported_not_dropped_silently(self, tmp_path):
        path = write_rows(tmp_path / "m.csv", ["a.png,0.5,0.5,1", "b.png,1.5,0,2", "c.png,x,0,2",
                                               "d.png,0,0,9", ",0,0,1"])
        m = load_manifest(path)
        assert len(m) == 1
        assert len(m.errors) == 4
        assert "line 3" in m.errors[0] and "outside [-1, 1]" in m.errors[0]
        with pytest.raises(ManifestError, match="4 malformed"):
            m.raise_for_errors()

    def test_missing_column(self, tmp_path):
        path = write_rows(tmp_path / "m.csv", ["a.png,0.5,0.5"], header="image_path,valence,arousal")
        with pytest.raises(ManifestError, match="expression"):
            load_manifest(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path / "nope.csv")

    def test_export_and_reload(self, tmp_path, small):
        path = export_dataset(small, tmp_path)
        back = Dataset.from_manifest(load_manifest(path))
        np.testing.assert_allclose(back.images, small.images, atol=0.5 / 255 + 1e-6)
        np.testing.assert_allclose(back.valence, small.valence, rtol=0, atol=0)
        np.testing.assert_array_equal(back.expression, small.expression)


class TestExpressionRule:
    @pytest.mark.parametrize("v,a,cls", [(0.1, 0.1, 0), (0.0, 0.0, 0), (1.0, 0.01, 1), (0.0, 1.0, 2),
                                         (-1.0, 0.01, 3), (-1.0, -0.01, 4), (0.0, -1.0, 5), (1.0, -0.01, 6)])
    def test_sectors(self, v, a, cls):
        assert expression_from_va(np.array([v]), np.array([a]))[0] == cls


class TestSynth:
    def test_deterministic(self):
        a, b = synth_dataset(6, seed=9), synth_dataset(6, seed=9)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.valence, b.valence)

    def test_ranges_and_shapes(self, small):
        assert small.images.shape == (12, 1, FULL, FULL) and small.images.dtype == np.float32
        assert small.images.min() >= 0 and small.images.max() <= 1
        for y in (small.valence, small.arousal):
            assert np.all(np.abs(y) <= 1)
        assert set(small.expression) <= set(range(7))

    def test_labels_follow_latents(self, small):
        z = small.latents
        np.testing.assert_allclose(small.valence, z[:, 0])
        np.testing.assert_allclose(small.arousal, 0.8 * z[:, 1] + 0.2 * z[:, 0])

    def test_all_classes_present(self):
        assert set(synth_dataset(400, seed=0).expression) == set(range(7))

    def test_corruption_fraction(self, small):
        data = synth_dataset(200, seed=1)
        bad = corrupt_labels(data, 0.1, seed=1)
        changed = (bad.valence != data.valence) | (bad.arousal != data.arousal)
        assert changed.sum() == 20
        np.testing.assert_array_equal(bad.expression, data.expression)
        assert np.all(np.abs(bad.valence) <= 1)

    def test_corruption_range_checked(self, small):
        with pytest.raises(ValueError):
            corrupt_labels(small, 1.5)

    def test_subset(self, small):
        sub = small.subset(np.array([1, 3]))
        assert len(sub) == 2
        np.testing.assert_array_equal(sub.images[1], small.images[3])
