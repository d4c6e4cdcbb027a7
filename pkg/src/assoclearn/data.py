"""Datasets, IDX files, synthetic blobs, batch samplers and augmentation."""

from __future__ import annotations

import gzip
import queue
import struct
import threading
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

IDX_UBYTE = 0x08


class IDXError(ValueError):
    pass


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an IDX byte string (unsigned-byte payload only)."""
    if len(data) < 4:
        raise IDXError("truncated IDX header")
    if data[0] != 0 or data[1] != 0:
        raise IDXError(f"bad IDX magic {data[:2].hex()}")
    if data[2] != IDX_UBYTE:
        raise IDXError(f"unsupported IDX type code 0x{data[2]:02x}")
    rank = data[3]
    head = 4 + 4 * rank
    if len(data) < head:
        raise IDXError("truncated IDX header")
    dims = struct.unpack(f">{rank}I", data[4:head])
    count = int(np.prod(dims)) if rank else 1
    if len(data) - head != count:
        raise IDXError(f"IDX payload has {len(data) - head} bytes, header promises {count}")
    return np.frombuffer(data, dtype=np.uint8, offset=head).reshape(dims).copy()


def serialize_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise IDXError(f"only uint8 arrays can be written, got {array.dtype}")
    head = bytes([0, 0, IDX_UBYTE, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    return head + array.tobytes()


def read_idx(path) -> np.ndarray:
    """Read a (possibly gzipped) IDX file."""
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    try:
        with opener(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise OSError(f"cannot read IDX file {path}: {e}") from e
    try:
        return parse_idx(data)
    except IDXError as e:
        raise IDXError(f"{path}: {e}") from None


def normalize(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


def denormalize(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((images + 1.0) * 127.5), 0, 255).astype(np.uint8)


@dataclass
class Dataset:
    images: np.ndarray          # [N, h, w, c]
    labels: np.ndarray | None   # [N] or None
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) < 1:
            raise ValueError(f"images must be [N, h, w, c] with N >= 1, got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise ValueError("one label per image required")
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.images)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, self.num_classes)

    def without_labels(self) -> "Dataset":
        return Dataset(self.images, None, self.num_classes)


def load_idx_dataset(images_path, labels_path=None, num_classes: int = 10) -> Dataset:
    pixels = read_idx(images_path)
    if pixels.ndim != 3:
        raise IDXError(f"{images_path}: image files must have rank 3, got {pixels.ndim}")
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path)
        if labels.ndim != 1:
            raise IDXError(f"{labels_path}: label files must have rank 1, got {labels.ndim}")
        if len(labels) != len(pixels):
            raise IDXError(f"{labels_path}: {len(labels)} labels for {len(pixels)} images")
    return Dataset(normalize(pixels)[..., None], labels, num_classes)


def simplex_means(K: int, dim: int) -> np.ndarray:
    """K class means with unit distance between neighbours, centred at the origin.

    For dim >= K - 1 these are the vertices of a regular simplex (all pairs at
    distance 1).  In fewer dimensions a regular simplex does not fit; the
    means then sit on a regular K-gon (dim >= 2) or on a line (dim = 1) with
    unit distance between adjacent means.
    """
    if K < 2:
        raise ValueError("need at least two classes")
    means = np.zeros((K, dim))
    if dim >= K - 1:
        E = np.eye(K) / np.sqrt(2.0)
        E -= E.mean(axis=0)
        # orthonormal basis of the (K-1)-dim affine hull
        q, _ = np.linalg.qr(E.T)
        means[:, :K - 1] = E @ q[:, :K - 1]
    elif dim >= 2:
        radius = 0.5 / np.sin(np.pi / K)
        angles = np.pi / K + 2 * np.pi * np.arange(K) / K
        means[:, 0] = radius * np.cos(angles)
        means[:, 1] = radius * np.sin(angles)
    else:
        means[:, 0] = np.arange(K) - (K - 1) / 2
    return means


def rotate_points(points: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the origin in the plane of the first two coordinates."""
    t = np.deg2rad(degrees)
    out = points.copy()
    c, s = np.cos(t), np.sin(t)
    out[:, 0] = c * points[:, 0] - s * points[:, 1]
    out[:, 1] = s * points[:, 0] + c * points[:, 1]
    return out


def synth_blobs(K: int, per_class: int, dim: int, spread: float, seed: int, rotation: float = 0.0) -> Dataset:
    """Gaussian clusters around :func:`simplex_means`, stored as [N, 1, 1, dim]."""
    rng = np.random.default_rng(seed)
    means = simplex_means(K, dim)
    labels = np.repeat(np.arange(K), per_class)
    points = means[labels] + spread * rng.standard_normal((len(labels), dim))
    if rotation:
        if dim < 2:
            raise ValueError("rotation needs dim >= 2")
        points = rotate_points(points, rotation)
    order = rng.permutation(len(labels))
    return Dataset(points[order].reshape(-1, 1, 1, dim).astype(np.float32), labels[order], K)


@dataclass
class SamplerConfig:
    labeled_per_class: int = 10
    unlabeled_batch: int = 100
    labeled_pool_size: int | None = None
    unlabeled_pool_size: int | None = None
    # draw the unlabeled batch from the labeled pool itself
    share_pool: bool = False
    seed: int = 0


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray | None = None
    indices: np.ndarray | None = None


def stratified_pool(labels: np.ndarray, num_classes: int, size: int | None, rng) -> np.ndarray:
    """Indices of a class-balanced labeled pool of ``size`` samples (all if None)."""
    if size is None:
        return np.arange(len(labels))
    per, extra = divmod(size, num_classes)
    pool = []
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        want = per + (1 if c < extra else 0)
        if len(members) < want:
            raise ValueError(f"class {c} has {len(members)} samples, labeled pool needs {want}")
        pool.append(rng.choice(members, size=want, replace=False))
    return np.sort(np.concatenate(pool))


def sample_labeled(ds: Dataset, cfg: SamplerConfig, rng, pool: np.ndarray | None = None) -> Batch:
    """Exactly ``labeled_per_class`` samples of every class from ``pool``."""
    if ds.labels is None:
        raise ValueError("labeled sampling needs a labeled dataset")
    pool = np.arange(len(ds)) if pool is None else pool
    labels = ds.labels[pool]
    picked = []
    for c in range(ds.num_classes):
        members = pool[labels == c]
        if len(members) < cfg.labeled_per_class:
            raise ValueError(
                f"class {c} has {len(members)} samples in the labeled pool, "
                f"{cfg.labeled_per_class} needed per batch")
        picked.append(rng.choice(members, size=cfg.labeled_per_class, replace=False))
    idx = np.concatenate(picked)
    return Batch(ds.images[idx], ds.labels[idx], idx)


def sample_unlabeled(ds: Dataset, cfg: SamplerConfig, rng, pool: np.ndarray | None = None) -> Batch:
    """Uniform draw without replacement; labels are never returned."""
    pool = np.arange(len(ds)) if pool is None else pool
    if len(pool) == 0:
        raise ValueError("unlabeled pool is empty")
    if cfg.unlabeled_batch > len(pool):
        raise ValueError(f"unlabeled batch {cfg.unlabeled_batch} exceeds pool of {len(pool)}")
    idx = pool[rng.choice(len(pool), size=cfg.unlabeled_batch, replace=False)]
    return Batch(ds.images[idx], None, idx)


class LabeledSampler:
    """Fixes a stratified labeled pool at construction, then draws balanced batches."""

    def __init__(self, ds: Dataset, cfg: SamplerConfig, rng: np.random.Generator):
        self.ds, self.cfg, self.rng = ds, cfg, rng
        self.pool = stratified_pool(ds.labels, ds.num_classes, cfg.labeled_pool_size, rng)
        # fail early rather than at the first draw
        counts = np.bincount(ds.labels[self.pool], minlength=ds.num_classes)
        if counts.min() < cfg.labeled_per_class:
            raise ValueError(
                f"class {int(counts.argmin())} has {counts.min()} samples in the labeled pool, "
                f"{cfg.labeled_per_class} needed per batch")

    def sample(self) -> Batch:
        return sample_labeled(self.ds, self.cfg, self.rng, self.pool)


class UnlabeledSampler:
    def __init__(self, ds: Dataset, cfg: SamplerConfig, rng: np.random.Generator, pool: np.ndarray | None = None):
        if cfg.unlabeled_pool_size == 0:
            raise ValueError("unlabeled_pool_size = 0 is not a valid sampler; use supervised mode")
        self.ds, self.cfg, self.rng = ds.without_labels(), cfg, rng
        if pool is None:
            pool = np.arange(len(ds))
            if cfg.unlabeled_pool_size is not None:
                if cfg.unlabeled_pool_size > len(ds):
                    raise ValueError(f"unlabeled pool of {cfg.unlabeled_pool_size} exceeds dataset of {len(ds)}")
                pool = np.sort(rng.choice(len(ds), size=cfg.unlabeled_pool_size, replace=False))
        self.pool = pool
        if cfg.unlabeled_batch > len(self.pool):
            raise ValueError(f"unlabeled batch {cfg.unlabeled_batch} exceeds pool of {len(self.pool)}")

    def sample(self) -> Batch:
        return sample_unlabeled(self.ds, self.cfg, self.rng, self.pool)


class Prefetcher:
    """Runs ``make_batch`` on a background thread, handing results through a
    bounded queue.  Batches come out in production order, so the stream is
    identical to calling ``make_batch`` inline."""

    _DONE = object()

    def __init__(self, make_batch, count: int, capacity: int = 4):
        self._q: queue.Queue = queue.Queue(maxsize=capacity)
        self._error: BaseException | None = None
        self._stop = threading.Event()

        def work():
            try:
                for _ in range(count):
                    if self._stop.is_set():
                        return
                    self._q.put(make_batch())
            except BaseException as e:  # re-raised on the consumer side
                self._error = e
            self._q.put(self._DONE)

        self._thread = threading.Thread(target=work, daemon=True)
        self._thread.start()

    def __iter__(self):
        while True:
            item = self._q.get()
            if item is self._DONE:
                if self._error is not None:
                    raise self._error
                return
            yield item

    def close(self):
        self._stop.set()
        while self._thread.is_alive():
            try:
                self._q.get_nowait()
            except queue.Empty:
                self._thread.join(0.01)


@dataclass
class AugmentPolicy:
    max_shift: int = 0          # pixels, both axes
    noise_std: float = 0.0
    max_rotation: float = 0.0   # degrees

    @property
    def is_identity(self) -> bool:
        return self.max_shift == 0 and self.noise_std == 0 and self.max_rotation == 0


def shift_image(img: np.ndarray, dx: int, dy: int, fill: float = -1.0) -> np.ndarray:
    """Translate by dx columns and dy rows; vacated pixels get ``fill``."""
    out = np.full_like(img, fill)
    h, w = img.shape[:2]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def augment(images: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Independent random shift / rotation / pixel noise per image, clamped to [-1, 1]."""
    if policy.is_identity:
        return images
    out = np.empty_like(images)
    for i, img in enumerate(images):
        if policy.max_rotation:
            angle = rng.uniform(-policy.max_rotation, policy.max_rotation)
            img = ndimage.rotate(img, angle, axes=(1, 0), reshape=False, order=0, mode="constant", cval=-1.0)
        if policy.max_shift:
            dx, dy = rng.integers(-policy.max_shift, policy.max_shift + 1, size=2)
            img = shift_image(img, int(dx), int(dy))
        if policy.noise_std:
            img = img + rng.normal(0.0, policy.noise_std, size=img.shape)
        out[i] = np.clip(img, -1.0, 1.0)
    return out
