import gzip
import itertools
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from assoclearn.data import (
    AugmentPolicy, Dataset, IDXError, LabeledSampler, Prefetcher, SamplerConfig, UnlabeledSampler, augment,
    denormalize, load_idx_dataset, normalize, parse_idx, read_idx, sample_labeled, sample_unlabeled,
    serialize_idx, shift_image, simplex_means, synth_blobs,
)

from conftest import mnist_paths


def labeled_set(K=10, per_class=30, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.repeat(np.arange(K), per_class))
    return Dataset(rng.uniform(-1, 1, size=(len(labels), 2, 2, 1)).astype(np.float32), labels, K)


class TestIDX:
    def test_hand_decoded(self):
        raw = bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3, 4, 5, 6, 7, 8])
        arr = parse_idx(raw)
        assert arr.shape == (2, 2, 2)
        assert arr[0].tolist() == [[1, 2], [3, 4]] and arr[1].tolist() == [[5, 6], [7, 8]]

    def test_labels(self):
        assert parse_idx(bytes([0, 0, 8, 1, 0, 0, 0, 3, 7, 2, 1])).tolist() == [7, 2, 1]

    @settings(max_examples=40)
    @given(st.lists(st.integers(1, 5), min_size=1, max_size=3), st.integers(0, 2**32 - 1))
    def test_round_trip(self, shape, seed):
        arr = np.random.default_rng(seed).integers(0, 256, size=shape, dtype=np.uint8)
        np.testing.assert_array_equal(parse_idx(serialize_idx(arr)), arr)

    @pytest.mark.parametrize("raw,match", [
        (bytes([1, 0, 8, 1, 0, 0, 0, 1, 5]), "magic"),
        (bytes([0, 0, 0x0D, 1, 0, 0, 0, 1, 5]), "type code"),
        (bytes([0, 0, 8, 1, 0, 0, 0, 3, 5, 6]), "payload"),
        (bytes([0, 0, 8, 3, 0, 0]), "truncated"),
        (bytes([0, 0]), "truncated"),
    ])
    def test_errors(self, raw, match):
        with pytest.raises(IDXError, match=match):
            parse_idx(raw)

    def test_gzip_and_dataset(self, tmp_path):
        pix = np.array([[[0, 255], [51, 204]]], dtype=np.uint8)
        (tmp_path / "img.gz").write_bytes(gzip.compress(serialize_idx(pix)))
        (tmp_path / "lab").write_bytes(serialize_idx(np.array([3], dtype=np.uint8)))
        ds = load_idx_dataset(tmp_path / "img.gz", tmp_path / "lab")
        assert ds.images.shape == (1, 2, 2, 1)
        np.testing.assert_allclose(ds.images[0, :, :, 0], [[-1, 1], [51 / 127.5 - 1, 204 / 127.5 - 1]], atol=1e-7)
        assert ds.labels.tolist() == [3]

    def test_label_count_mismatch(self, tmp_path):
        (tmp_path / "img").write_bytes(serialize_idx(np.zeros((2, 2, 2), np.uint8)))
        (tmp_path / "lab").write_bytes(serialize_idx(np.zeros(3, np.uint8)))
        with pytest.raises(IDXError, match="3 labels for 2 images"):
            load_idx_dataset(tmp_path / "img", tmp_path / "lab")

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError, match="nope"):
            read_idx(tmp_path / "nope")

    @pytest.mark.skipif(mnist_paths() is None, reason="MNIST files not present")
    def test_mnist_files(self):
        paths = mnist_paths()
        test = load_idx_dataset(paths["test_images"], paths["test_labels"])
        assert test.images.shape == (10000, 28, 28, 1)
        assert test.labels[:10].tolist() == [7, 2, 1, 0, 4, 1, 4, 9, 5, 9]
        assert test.images.min() == -1.0 and test.images.max() == 1.0


def test_normalization_round_trip():
    p = np.arange(256, dtype=np.uint8)
    x = normalize(p)
    assert x[0] == -1.0 and x[-1] == 1.0
    np.testing.assert_array_equal(denormalize(x), p)


class TestBlobs:
    def test_zero_spread_gives_means(self):
        ds = synth_blobs(3, 5, 2, 0.0, seed=1)
        means = simplex_means(3, 2)
        np.testing.assert_allclose(ds.images.reshape(-1, 2), means[ds.labels], atol=1e-7)

    def test_deterministic(self):
        a, b = synth_blobs(4, 20, 3, 0.3, seed=5), synth_blobs(4, 20, 3, 0.3, seed=5)
        assert a.images.tobytes() == b.images.tobytes() and a.labels.tolist() == b.labels.tolist()
        assert synth_blobs(4, 20, 3, 0.3, seed=6).images.tobytes() != a.images.tobytes()

    def test_nearest_mean_separable(self):
        ds = synth_blobs(2, 500, 2, 0.05, seed=0)
        x = ds.images.reshape(-1, 2).astype(np.float64)
        means = simplex_means(2, 2)
        d = ((x[:, None, :] - means[None]) ** 2).sum(-1)
        assert len(x) == 1000
        assert (d.argmin(1) == ds.labels).mean() == 1.0

    @pytest.mark.parametrize("K,dim", [(2, 1), (3, 2), (4, 3), (5, 8), (10, 9)])
    def test_simplex_unit_distances(self, K, dim):
        m = simplex_means(K, dim)
        d = np.linalg.norm(m[:, None] - m[None], axis=-1)
        np.testing.assert_allclose(d[~np.eye(K, dtype=bool)], 1.0, atol=1e-12)
        np.testing.assert_allclose(m.mean(0), 0.0, atol=1e-12)

    def test_low_dimension_polygon(self):
        m = simplex_means(4, 2)
        np.testing.assert_allclose(np.abs(m), 0.5, atol=1e-12)
        adjacent = np.linalg.norm(m - np.roll(m, 1, axis=0), axis=1)
        np.testing.assert_allclose(adjacent, 1.0, atol=1e-12)

    def test_rotation(self):
        a = synth_blobs(3, 10, 2, 0.1, seed=2)
        b = synth_blobs(3, 10, 2, 0.1, seed=2, rotation=90)
        x, y = a.images.reshape(-1, 2).T
        np.testing.assert_allclose(b.images.reshape(-1, 2), np.stack([-y, x], 1), atol=1e-6)
        assert a.labels.tolist() == b.labels.tolist()


class TestLabeledSampling:
    def test_uniform_histogram(self, rng):
        ds = labeled_set()
        batch = sample_labeled(ds, SamplerConfig(labeled_per_class=10), rng)
        assert len(batch.labels) == 100
        assert np.bincount(batch.labels, minlength=10).tolist() == [10] * 10
        np.testing.assert_array_equal(ds.labels[batch.indices], batch.labels)

    def test_two_per_class(self, rng):
        batch = sample_labeled(labeled_set(), SamplerConfig(labeled_per_class=2), rng)
        assert np.bincount(batch.labels).tolist() == [2] * 10

    def test_pool_too_small(self, rng):
        with pytest.raises(ValueError, match="class"):
            LabeledSampler(labeled_set(), SamplerConfig(labeled_per_class=3, labeled_pool_size=20), rng)

    def test_fixed_pool(self, rng):
        ds = labeled_set()
        sampler = LabeledSampler(ds, SamplerConfig(labeled_per_class=2, labeled_pool_size=20), rng)
        assert len(sampler.pool) == 20
        assert np.bincount(ds.labels[sampler.pool]).tolist() == [2] * 10
        for _ in range(5):
            assert set(sampler.sample().indices) == set(sampler.pool)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 6), st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_always_stratified(self, K, per, seed):
        ds = labeled_set(K=K, per_class=8, seed=seed)
        sampler = LabeledSampler(ds, SamplerConfig(labeled_per_class=per), np.random.default_rng(seed))
        for _ in range(3):
            assert np.bincount(sampler.sample().labels, minlength=K).tolist() == [per] * K


class TestUnlabeledSampling:
    def test_labels_stripped(self, rng):
        batch = sample_unlabeled(labeled_set(), SamplerConfig(unlabeled_batch=50), rng)
        assert batch.labels is None and len(batch.images) == 50
        assert len(set(batch.indices)) == 50

    def test_batch_equals_pool(self, rng):
        ds = labeled_set(K=2, per_class=10)
        sampler = UnlabeledSampler(ds, SamplerConfig(unlabeled_batch=7, unlabeled_pool_size=7), rng)
        assert sorted(sampler.sample().indices) == sorted(sampler.pool)
        assert sampler.ds.labels is None

    def test_zero_pool_rejected(self, rng):
        with pytest.raises(ValueError, match="supervised"):
            UnlabeledSampler(labeled_set(), SamplerConfig(unlabeled_pool_size=0), rng)

    def test_empty_pool(self, rng):
        with pytest.raises(ValueError, match="empty"):
            sample_unlabeled(labeled_set(), SamplerConfig(), rng, pool=np.array([], dtype=int))

    def test_batch_exceeds_pool(self, rng):
        with pytest.raises(ValueError, match="exceeds"):
            UnlabeledSampler(labeled_set(K=2, per_class=5), SamplerConfig(unlabeled_batch=11), rng)

    def test_reproducible_epoch(self):
        ds = labeled_set()
        cfg = SamplerConfig(labeled_per_class=3, unlabeled_batch=20, labeled_pool_size=40, unlabeled_pool_size=100)

        def epoch(seed):
            r = np.random.default_rng(seed)
            lab, unl = LabeledSampler(ds, cfg, r), UnlabeledSampler(ds, cfg, r)
            return [np.concatenate([lab.sample().indices, unl.sample().indices]).tolist() for _ in range(10)]

        assert epoch(3) == epoch(3)
        assert epoch(3) != epoch(4)


class TestPrefetcher:
    def test_same_stream_as_inline(self):
        a = np.random.default_rng(0)
        b = np.random.default_rng(0)
        inline = [a.integers(0, 1000) for _ in range(20)]
        assert list(Prefetcher(lambda: b.integers(0, 1000), 20, capacity=2)) == inline

    def test_bounded(self):
        produced = itertools.count()
        p = Prefetcher(lambda: next(produced), 100, capacity=3)
        time.sleep(0.05)
        # capacity items queued plus at most one blocked in put
        assert next(produced) <= 5
        p.close()

    def test_error_propagates(self):
        def boom():
            raise RuntimeError("bad batch")

        with pytest.raises(RuntimeError, match="bad batch"):
            list(Prefetcher(boom, 3))


class TestAugment:
    def setup_method(self):
        self.images = np.random.default_rng(0).uniform(-1, 1, size=(4, 8, 8, 1)).astype(np.float32)

    def test_identity(self, rng):
        assert augment(self.images, AugmentPolicy(), rng).tobytes() == self.images.tobytes()

    def test_impulse_shift(self):
        img = np.full((5, 5, 1), -1.0)
        img[2, 2] = 1.0
        out = shift_image(img, 1, 0)
        assert out[2, 3, 0] == 1.0 and out.sum() == img.sum()
        out = shift_image(img, -2, 1)
        assert out[3, 0, 0] == 1.0

    def test_shift_fill_is_black(self):
        out = shift_image(np.ones((3, 3, 1)), 2, 0)
        assert out[:, :2].tolist() == np.full((3, 2, 1), -1.0).tolist()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2), st.floats(0, 2), st.floats(0, 10), st.integers(0, 2**32 - 1))
    def test_range(self, shift, noise, rot, seed):
        out = augment(self.images, AugmentPolicy(shift, noise, rot), np.random.default_rng(seed))
        assert out.shape == self.images.shape
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_deterministic(self):
        policy = AugmentPolicy(2, 0.1, 10)
        a = augment(self.images, policy, np.random.default_rng(3))
        b = augment(self.images, policy, np.random.default_rng(3))
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, self.images)
