import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from colopath import transforms
from colopath.ingest import DatasetManifest, SampleRecord, save_png
from colopath.transforms import (
    IMAGENET_STATS,
    AugmentPolicy,
    NormalizationStats,
    augment,
    compute_stats,
    denormalize,
    make_pipeline,
    normalize,
    resize_bilinear,
)


def bilinear_oracle(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Direct half-pixel-centre bilinear formula, source coords clamped at 0."""
    in_h, in_w = img.shape
    out = np.empty((out_h, out_w))
    for i in range(out_h):
        y = max((i + 0.5) * in_h / out_h - 0.5, 0.0)
        y0 = min(int(np.floor(y)), in_h - 1)
        y1 = min(y0 + 1, in_h - 1)
        wy = y - y0
        for j in range(out_w):
            x = max((j + 0.5) * in_w / out_w - 0.5, 0.0)
            x0 = min(int(np.floor(x)), in_w - 1)
            x1 = min(x0 + 1, in_w - 1)
            wx = x - x0
            top = (1 - wx) * img[y0, x0] + wx * img[y0, x1]
            bot = (1 - wx) * img[y1, x0] + wx * img[y1, x1]
            out[i, j] = (1 - wy) * top + wy * bot
    return out


def manifest_of(tmp_path, images):
    records = []
    for i, img in enumerate(images):
        path = tmp_path / f"{i}.png"
        save_png(img, path)
        records.append(SampleRecord(str(i), str(path), 0, "train"))
    return DatasetManifest("histology", records, ["a", "b"])


class TestStats:
    def test_constant_images_clamp_std(self, tmp_path):
        imgs = [np.full((4, 4, 3), 128, np.uint8) for _ in range(3)]
        stats = compute_stats(manifest_of(tmp_path, imgs))
        np.testing.assert_allclose(stats.mean, [128 / 255] * 3, atol=1e-12)
        assert stats.std == (1e-6, 1e-6, 1e-6)

    def test_two_pixel_population_std(self, tmp_path):
        a = np.zeros((1, 1, 3), np.uint8)
        b = np.zeros((1, 1, 3), np.uint8)
        b[0, 0, 0] = 255
        stats = compute_stats(manifest_of(tmp_path, [a, b]))
        assert stats.mean[0] == pytest.approx(0.5, abs=1e-12)
        assert stats.std[0] == pytest.approx(0.5, abs=1e-12)
        assert stats.mean[1] == 0.0

    def test_matches_numpy(self, tmp_path):
        rng = np.random.default_rng(3)
        imgs = [rng.integers(0, 256, (5, 7, 3), dtype=np.uint8) for _ in range(4)]
        stats = compute_stats(manifest_of(tmp_path, imgs))
        px = np.concatenate([im.reshape(-1, 3) for im in imgs]) / 255.0
        np.testing.assert_allclose(stats.mean, px.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(stats.std, px.std(axis=0, ddof=0), atol=1e-9)

    def test_empty_split(self, tmp_path):
        m = manifest_of(tmp_path, [np.zeros((2, 2, 3), np.uint8)])
        with pytest.raises(ValueError, match="empty"):
            compute_stats(m, "val")

    def test_imagenet_constants(self):
        assert IMAGENET_STATS.mean == (0.485, 0.456, 0.406)
        assert IMAGENET_STATS.std == (0.229, 0.224, 0.225)

    def test_json_round_trip(self, tmp_path):
        s = NormalizationStats((0.1, 0.2, 0.3), (0.4, 0.5, 0.6))
        s.to_json(tmp_path / "stats.json")
        assert NormalizationStats.from_json(tmp_path / "stats.json") == s
        assert '"scale": "unit"' in (tmp_path / "stats.json").read_text()


class TestNormalize:
    def test_mean_pixel_maps_to_zero(self):
        stats = NormalizationStats((0.2, 0.4, 0.6), (0.1, 0.2, 0.3))
        img = torch.tensor(stats.mean, dtype=torch.float64).view(3, 1, 1).expand(3, 2, 2)
        assert torch.equal(normalize(img, stats), torch.zeros(3, 2, 2, dtype=torch.float64))

    def test_identity_stats(self):
        img = torch.rand(3, 5, 5)
        assert torch.equal(normalize(img, NormalizationStats((0, 0, 0), (1, 1, 1))), img)

    def test_imagenet_red_example(self):
        img = torch.full((3, 1, 1), 0.714, dtype=torch.float64)
        assert normalize(img, IMAGENET_STATS)[0, 0, 0].item() == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(
        x=arrays(np.float64, (3, 4, 4), elements=st.floats(0, 1)),
        mean=st.tuples(*[st.floats(0, 1)] * 3),
        std=st.tuples(*[st.floats(1e-3, 1)] * 3),
    )
    def test_round_trip(self, x, mean, std):
        stats = NormalizationStats(mean, std)
        t = torch.from_numpy(x)
        np.testing.assert_allclose(normalize(denormalize(t, stats), stats).numpy(), x, atol=1e-6)
        assert torch.isfinite(normalize(t, stats)).all()

    @settings(max_examples=50, deadline=None)
    @given(
        x=arrays(np.float64, (3, 3, 3), elements=st.floats(-5, 5)),
        a=st.floats(0.01, 10),
        b=st.floats(-1, 1),
    )
    def test_linearity(self, x, a, b):
        t = torch.from_numpy(x)
        stats = NormalizationStats((b, b, b), (a, a, a))
        np.testing.assert_allclose(normalize(a * t + b, stats).numpy(), x, atol=1e-9)


class TestResize:
    def test_identity_at_target(self):
        img = torch.rand(3, 224, 224)
        assert torch.equal(resize_bilinear(img), img)

    def test_constant_preserved(self):
        img = torch.full((3, 28, 28), 0.37)
        out = resize_bilinear(img, 224)
        assert out.shape == (3, 224, 224)
        torch.testing.assert_close(out, torch.full((3, 224, 224), 0.37))

    def test_checkerboard_oracle(self):
        board = np.array([[0.0, 1.0], [1.0, 0.0]])
        out = resize_bilinear(torch.from_numpy(board), 4).numpy()
        expected = bilinear_oracle(board, 4, 4)
        np.testing.assert_allclose(out, expected, atol=1e-12)
        np.testing.assert_allclose(expected[1], [0.25, 0.375, 0.625, 0.75])

    @settings(max_examples=25, deadline=None)
    @given(h=st.integers(1, 9), w=st.integers(1, 9), side=st.integers(1, 12), seed=st.integers(0, 1000))
    def test_random_sizes_match_oracle(self, h, w, side, seed):
        img = np.random.default_rng(seed).random((h, w))
        out = resize_bilinear(torch.from_numpy(img), side).numpy()
        np.testing.assert_allclose(out, bilinear_oracle(img, side, side), atol=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            resize_bilinear(torch.zeros(3, 0, 4))


class TestAugment:
    def test_null_policy_is_identity(self):
        img = torch.rand(3, 16, 16)
        out = augment(img, AugmentPolicy(0, 0, 0), np.random.default_rng(0))
        assert torch.equal(out, img)

    def test_flip_involution(self):
        img = torch.rand(3, 8, 8)
        policy = AugmentPolicy(1.0, 0, 0)
        once = augment(img, policy, np.random.default_rng(1))
        assert torch.equal(once, torch.flip(img, dims=[-1]))
        assert torch.equal(augment(once, policy, np.random.default_rng(2)), img)

    def test_seeded_determinism(self):
        img = torch.rand(3, 32, 32)
        policy = transforms.HISTOLOGY_POLICY
        a = augment(img, policy, np.random.default_rng(42))
        b = augment(img, policy, np.random.default_rng(42))
        assert torch.equal(a, b)
        assert not torch.equal(a, img)

    def test_rotation_reflects_instead_of_black_corners(self):
        img = torch.full((3, 32, 32), 0.8)
        out = transforms.rotate_reflect(img, 15.0)
        torch.testing.assert_close(out, img)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), rot=st.floats(0, 30), jitter=st.floats(0, 0.9))
    def test_output_in_unit_range(self, seed, rot, jitter):
        img = torch.from_numpy(np.random.default_rng(seed).random((3, 12, 12))).float()
        out = augment(img, AugmentPolicy(0.5, rot, jitter), np.random.default_rng(seed))
        assert out.min() >= 0 and out.max() <= 1

    def test_policy_validation(self):
        with pytest.raises(ValueError):
            AugmentPolicy(1.5, 0, 0)
        with pytest.raises(ValueError):
            AugmentPolicy(0.5, -1, 0)
        with pytest.raises(ValueError):
            AugmentPolicy(0.5, 0, 1.0)


class TestPipelineWiring:
    def test_eval_pipeline_never_augments(self, monkeypatch):
        def boom(*a, **k):
            raise AssertionError("augment called")

        monkeypatch.setattr(transforms, "augment", boom)
        pipe = make_pipeline(IMAGENET_STATS, 32, None)
        out = pipe(np.zeros((28, 28, 3), np.uint8))
        assert out.shape == (3, 32, 32)

    def test_train_pipeline_augments(self, monkeypatch):
        calls = []
        real = transforms.augment
        monkeypatch.setattr(transforms, "augment", lambda *a: calls.append(1) or real(*a))
        pipe = make_pipeline(IMAGENET_STATS, 32, transforms.COLONOSCOPY_POLICY)
        pipe(np.zeros((28, 28, 3), np.uint8), np.random.default_rng(0))
        assert calls == [1]

    def test_trainer_eval_datasets_use_eval_pipeline(self, small_synthetic, monkeypatch, tmp_path):
        from colopath import trainer
        from conftest import tiny_config

        seen = []
        real = transforms.augment

        def spy(img, policy, rng):
            seen.append(1)
            return real(img, policy, rng)

        monkeypatch.setattr(transforms, "augment", spy)
        eval_calls = []
        real_predict = trainer.predict

        def counting_predict(model, records, pipeline, *a, **k):
            before = len(seen)
            out = real_predict(model, records, pipeline, *a, **k)
            eval_calls.append(len(seen) - before)
            return out

        monkeypatch.setattr(trainer, "predict", counting_predict)
        cfg = tiny_config(num_classes=2, input_side=32, max_epochs=2, early_stop_patience=5)
        trainer.train(cfg, small_synthetic, 0, tmp_path / "run")
        assert len(seen) == 2 * 24
        assert eval_calls and all(c == 0 for c in eval_calls)
