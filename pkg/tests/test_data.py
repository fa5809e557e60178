"""Parsers, synthetic data, and batching."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cvtr.data import (BatchPlan, DataError, LabeledDataset, batches,
                       augment_batch, parse_cifar10, parse_idx,
                       synthetic_blobs, write_cifar10, write_idx)


def make_idx_bytes(images_u8: np.ndarray, labels_u8: np.ndarray):
    n, h, w = images_u8.shape
    img = struct.pack(">IIII", 0x803, n, h, w) + images_u8.tobytes()
    lab = struct.pack(">II", 0x801, n) + labels_u8.tobytes()
    return img, lab


class TestIdx:
    def test_single_zero_image(self):
        img, lab = make_idx_bytes(np.zeros((1, 28, 28), np.uint8),
                                  np.array([3], np.uint8))
        ds = parse_idx(img, lab)
        assert ds.images.shape == (1, 1, 28, 28)
        assert ds.images.min() == ds.images.max() == 0.0
        assert ds.labels.tolist() == [3]

    def test_scaling_each_pixel_by_255(self):
        raw = np.arange(256, dtype=np.uint8).reshape(1, 16, 16)
        img, lab = make_idx_bytes(raw, np.array([0], np.uint8))
        ds = parse_idx(img, lab)
        assert np.allclose(ds.images[0, 0].ravel() * 255.0,
                           np.arange(256), atol=1e-12)

    def test_magic_rejection(self):
        img, lab = make_idx_bytes(np.zeros((1, 4, 4), np.uint8),
                                  np.array([0], np.uint8))
        bad_img = struct.pack(">I", 0x802) + img[4:]
        with pytest.raises(DataError, match="magic"):
            parse_idx(bad_img, lab)
        bad_lab = struct.pack(">I", 0x803) + lab[4:]
        with pytest.raises(DataError, match="magic"):
            parse_idx(img, bad_lab)

    def test_truncation(self):
        img, lab = make_idx_bytes(np.zeros((2, 4, 4), np.uint8),
                                  np.zeros(2, np.uint8))
        with pytest.raises(DataError, match="truncated"):
            parse_idx(img[:-3], lab)

    def test_count_mismatch(self):
        img, _ = make_idx_bytes(np.zeros((2, 4, 4), np.uint8),
                                np.zeros(2, np.uint8))
        _, lab = make_idx_bytes(np.zeros((3, 4, 4), np.uint8),
                                np.zeros(3, np.uint8))
        with pytest.raises(DataError, match="mismatch"):
            parse_idx(img, lab)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 5), st.integers(2, 9), st.data())
    def test_round_trip_bit_identical(self, n, side, data):
        pixels = data.draw(st.binary(min_size=n * side * side,
                                     max_size=n * side * side))
        raw = np.frombuffer(pixels, np.uint8).reshape(n, side, side)
        labels = np.asarray(
            data.draw(st.lists(st.integers(0, 9), min_size=n, max_size=n)),
            np.uint8)
        img, lab = make_idx_bytes(raw, labels)
        ds = parse_idx(img, lab)
        img2, lab2 = write_idx(ds)
        assert img2 == img and lab2 == lab
        ds2 = parse_idx(img2, lab2)
        assert np.array_equal(ds.images, ds2.images)
        assert np.array_equal(ds.labels, ds2.labels)


class TestCifar10:
    def test_single_record(self):
        rec = bytes([7]) + bytes(3072)
        ds = parse_cifar10(rec)
        assert len(ds) == 1 and ds.labels.tolist() == [7]
        assert ds.images.shape == (1, 3, 32, 32)

    def test_channel_planar_decode(self):
        rec = bytearray(3073)
        rec[0] = 1
        rec[1] = 255            # first red-plane pixel
        rec[1 + 1024] = 51      # first green-plane pixel
        ds = parse_cifar10(bytes(rec))
        assert ds.images[0, 0, 0, 0] == 1.0
        assert abs(ds.images[0, 1, 0, 0] - 51 / 255) < 1e-12
        assert ds.images[0, 2, 0, 0] == 0.0

    def test_bad_length(self):
        with pytest.raises(DataError, match="3073"):
            parse_cifar10(bytes(3072))

    def test_bad_label_byte(self):
        rec = bytes([12]) + bytes(3072)
        with pytest.raises(DataError, match="out of range"):
            parse_cifar10(rec)

    def test_multi_record_and_round_trip(self):
        rng = np.random.default_rng(0)
        payload = rng.integers(0, 255, size=10 * 3073, dtype=np.uint8)
        payload[::3073] = rng.integers(0, 10, size=10, dtype=np.uint8)
        ds = parse_cifar10(payload.tobytes())
        assert len(ds) == 10
        assert write_cifar10(ds) == payload.tobytes()


class TestSyntheticBlobs:
    def test_spread_zero_hits_centers(self):
        centers = [(0.2, 0.2), (0.8, 0.8)]
        ds = synthetic_blobs(5, centers, 0.0, seed=1)
        assert ds.images.shape == (10, 1, 1, 2)
        for img, lab in zip(ds.images, ds.labels):
            assert np.allclose(img.ravel(), centers[lab])

    def test_same_seed_identical(self):
        a = synthetic_blobs(50, [(0.2, 0.2), (0.8, 0.8)], 0.05, seed=9)
        b = synthetic_blobs(50, [(0.2, 0.2), (0.8, 0.8)], 0.05, seed=9)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_linearly_separable_by_perceptron(self):
        # independent oracle: run the perceptron algorithm to convergence;
        # it halts iff the data admit a positive margin
        ds = synthetic_blobs(100, [(0.2, 0.2), (0.8, 0.8)], 0.05, seed=3)
        x = np.hstack([ds.images.reshape(len(ds), -1),
                       np.ones((len(ds), 1))])
        y = np.where(ds.labels == 0, -1.0, 1.0)
        w = np.zeros(x.shape[1])
        for _ in range(1000):
            wrong = (np.sign(x @ w) != y)
            if not wrong.any():
                break
            i = int(np.flatnonzero(wrong)[0])
            w += y[i] * x[i]
        assert not (np.sign(x @ w) != y).any(), "perceptron did not separate"
        margins = y * (x @ w) / np.linalg.norm(w[:-1])
        assert margins.min() > 0

    def test_center_validation(self):
        with pytest.raises(DataError):
            synthetic_blobs(5, [(0.2, 0.2), (1.4, 0.5)], 0.1)
        with pytest.raises(DataError):
            synthetic_blobs(5, [(0.2, 0.2)], 0.1)


class TestBatching:
    def _ds(self, n=10, d=3):
        imgs = np.linspace(0, 1, n * d).reshape(n, 1, 1, d)
        return LabeledDataset(imgs, np.zeros(n, np.int64), num_classes=2)

    def test_drop_last(self):
        out = list(batches(self._ds(10), BatchPlan(3, seed=0, drop_last=True)))
        assert [b[0].shape[0] for b in out] == [3, 3, 3]

    def test_keep_last(self):
        out = list(batches(self._ds(10), BatchPlan(3, seed=0)))
        assert [b[0].shape[0] for b in out] == [3, 3, 3, 1]

    def test_partition_covers_everything(self):
        ds = self._ds(10)
        seen = np.concatenate(
            [img.reshape(img.shape[0], -1)[:, 0]
             for img, _ in batches(ds, BatchPlan(3, seed=5))])
        assert len(seen) == 10
        assert np.allclose(np.sort(seen),
                           ds.images.reshape(10, -1)[:, 0])

    def test_reproducible_per_seed(self):
        ds = self._ds(32)
        a = [img.copy() for img, _ in batches(ds, BatchPlan(8, seed=4))]
        b = [img.copy() for img, _ in batches(ds, BatchPlan(8, seed=4))]
        c = [img.copy() for img, _ in batches(ds, BatchPlan(8, seed=5))]
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert any(not np.array_equal(x, y) for x, y in zip(a, c))

    def test_no_shuffle_when_seed_none(self):
        ds = self._ds(6)
        out = list(batches(ds, BatchPlan(2, seed=None)))
        joined = np.concatenate([img for img, _ in out])
        assert np.array_equal(joined, ds.images)

    def test_batch_size_validated(self):
        with pytest.raises(DataError):
            BatchPlan(0)


class TestDatasetValidation:
    def test_pixel_range_enforced(self):
        with pytest.raises(DataError, match="0, 1"):
            LabeledDataset(np.full((1, 1, 1, 2), 1.5), np.zeros(1), 2)

    def test_label_range_enforced(self):
        with pytest.raises(DataError, match="label"):
            LabeledDataset(np.zeros((1, 1, 1, 2)), np.array([5]), 2)

    def test_count_mismatch(self):
        with pytest.raises(DataError, match="mismatch"):
            LabeledDataset(np.zeros((2, 1, 1, 2)), np.zeros(3), 2)


class TestAugmentation:
    def test_deterministic_under_seeded_rng(self):
        imgs = np.random.default_rng(0).random((4, 3, 8, 8))
        a = augment_batch(imgs, np.random.default_rng(11))
        b = augment_batch(imgs, np.random.default_rng(11))
        assert np.array_equal(a, b)

    def test_preserves_shape_and_range(self):
        imgs = np.random.default_rng(1).random((4, 3, 8, 8))
        out = augment_batch(imgs, np.random.default_rng(2))
        assert out.shape == imgs.shape
        assert out.min() >= 0 and out.max() <= 1
