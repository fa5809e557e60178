"""Dataset handling: IDX and CIFAR-10 binary parsers, synthetic sets, batching.

Pixels live on the raw [0, 1] scale with no mean/std normalization, because
every perturbation budget in this package (0.1, 0.2, 8/255, ...) is stated
on that scale.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes


class DataError(ValueError):
    pass


@dataclass
class LabeledDataset:
    """Images as float64 [N, C, H, W] in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [N,C,H,W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError("image/label count mismatch")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("pixel values outside [0, 1]")
        if self.labels.size and (
                self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("label out of range")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, n: int) -> "LabeledDataset":
        """First n examples (deterministic head subset)."""
        return LabeledDataset(self.images[:n], self.labels[:n], self.num_classes)

    def take(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    seed: int | None = 0       # None = keep dataset order
    drop_last: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise DataError("batch size must be >= 1")


def batches(dataset: LabeledDataset, plan: BatchPlan):
    """Yield (images, labels) batches; identical seed => identical sequence."""
    n = len(dataset)
    if plan.seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng(plan.seed).permutation(n)
    stop = (n // plan.batch_size) * plan.batch_size if plan.drop_last else n
    for start in range(0, stop, plan.batch_size):
        idx = order[start:start + plan.batch_size]
        yield dataset.images[idx], dataset.labels[idx]


# ---------------------------------------------------------------------------
# IDX (MNIST) binary format: big-endian magic, big-endian u32 dims, raw bytes
# ---------------------------------------------------------------------------

def _idx_header(data: bytes, what: str, expected_magic: int
                ) -> tuple[list[int], int]:
    if len(data) < 4:
        raise DataError(f"truncated {what} stream (no magic)")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise DataError(f"bad {what} magic 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(data) < 4 + 4 * ndim:
        raise DataError(f"truncated {what} stream (dimension header)")
    dims = list(struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim]))
    return dims, 4 + 4 * ndim


def parse_idx(image_bytes: bytes, label_bytes: bytes) -> LabeledDataset:
    """Decode an IDX image/label stream pair into a dataset.

    Accepts image magic 0x00000803 ([N, H, W] of unsigned bytes) and label
    magic 0x00000801; anything else is rejected. Pixels are scaled by 1/255.
    """
    dims, off = _idx_header(image_bytes, "image", IDX_IMAGE_MAGIC)
    n, h, w = dims
    body = image_bytes[off:]
    if len(body) != n * h * w:
        raise DataError(f"truncated image stream: want {n * h * w} pixel bytes, "
                        f"got {len(body)}")
    images = np.frombuffer(body, dtype=np.uint8).reshape(n, 1, h, w) / 255.0

    ldims, loff = _idx_header(label_bytes, "label", IDX_LABEL_MAGIC)
    if ldims[0] != n:
        raise DataError(f"image/label count mismatch: {n} images, {ldims[0]} labels")
    lbody = label_bytes[loff:]
    if len(lbody) != n:
        raise DataError("truncated label stream")
    labels = np.frombuffer(lbody, dtype=np.uint8).astype(np.int64)
    return LabeledDataset(images, labels, num_classes=10)


def write_idx(dataset: LabeledDataset) -> tuple[bytes, bytes]:
    """Serialize a dataset back to IDX streams (inverse of parse_idx).

    Pixels are quantized to bytes, so this round-trips bit-exactly for data
    that came from IDX in the first place.
    """
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise DataError("IDX serialization expects single-channel images")
    pix = np.rint(dataset.images * 255.0).astype(np.uint8)
    image_bytes = struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w) + pix.tobytes()
    label_bytes = (struct.pack(">II", IDX_LABEL_MAGIC, n)
                   + dataset.labels.astype(np.uint8).tobytes())
    return image_bytes, label_bytes


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches: 3073-byte records, label byte + channel planes
# ---------------------------------------------------------------------------

def parse_cifar10(batch_bytes: bytes) -> LabeledDataset:
    if len(batch_bytes) % CIFAR_RECORD_BYTES:
        raise DataError(
            f"CIFAR-10 batch length {len(batch_bytes)} is not a multiple "
            f"of {CIFAR_RECORD_BYTES}")
    n = len(batch_bytes) // CIFAR_RECORD_BYTES
    raw = np.frombuffer(batch_bytes, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DataError(f"label byte {labels.max()} out of range 0..9")
    images = raw[:, 1:].reshape(n, 3, 32, 32) / 255.0
    return LabeledDataset(images, labels, num_classes=10)


def write_cifar10(dataset: LabeledDataset) -> bytes:
    n, c, h, w = dataset.images.shape
    if (c, h, w) != (3, 32, 32):
        raise DataError("CIFAR-10 serialization expects [N,3,32,32] images")
    pix = np.rint(dataset.images * 255.0).astype(np.uint8).reshape(n, 3072)
    rec = np.concatenate(
        [dataset.labels.astype(np.uint8)[:, None], pix], axis=1)
    return rec.tobytes()


# ---------------------------------------------------------------------------
# synthetic data and augmentation
# ---------------------------------------------------------------------------

def synthetic_blobs(n_per_class: int, centers, spread: float,
                    seed: int = 0) -> LabeledDataset:
    """Gaussian clouds around class centers in [0,1]^d, clipped into the box.

    Shaped [N, 1, 1, d] so the rest of the stack treats points as 1-pixel
    images. spread 0 puts every point exactly on its center.
    """
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[0] < 2:
        raise DataError("need at least 2 centers of equal dimension")
    if spread < 0:
        raise DataError("spread must be >= 0")
    if centers.min() < 0 or centers.max() > 1:
        raise DataError("centers must lie in [0,1]^d")
    k, d = centers.shape
    rng = np.random.default_rng(seed)
    pts = centers[None, :, :] + spread * rng.standard_normal((n_per_class, k, d))
    pts = np.clip(pts, 0.0, 1.0)
    images = pts.reshape(n_per_class * k, 1, 1, d)
    labels = np.tile(np.arange(k), n_per_class)
    return LabeledDataset(images, labels, num_classes=k)


def augment_batch(images: np.ndarray, rng: np.random.Generator,
                  pad: int = 4) -> np.ndarray:
    """Random crop (after zero padding) and horizontal flip, CIFAR style.

    Off by default in training configs; deterministic under a seeded rng.
    """
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        dy, dx = offs[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out
