"""Dataset construction: 2-D synthetic tasks and CIFAR-10 binary loading.

All datasets come back as float64 (N, C, H, W) tensors. 2-D point clouds use
C=2, H=W=1 so the same network stack handles everything.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from shufflemix.errors import DataFormatError, DimensionError, ParameterError

RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixel bytes, channel-major


@dataclass
class DatasetMeta:
    name: str
    task: str  # "classification" or "multilabel"
    num_classes: int
    class_counts: list
    # Post-normalization per-channel (low, high) bounds, or None when the
    # input space is unbounded (gaussian point clouds).
    input_range: tuple | None = None
    extra: dict = field(default_factory=dict)


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    meta: DatasetMeta

    def __len__(self):
        return self.inputs.shape[0]


def _points_dataset(xy: np.ndarray, labels: np.ndarray, meta: DatasetMeta) -> Dataset:
    n, dim = xy.shape
    inputs = xy.astype(np.float64).reshape(n, dim, 1, 1)
    return Dataset(inputs=inputs, labels=labels, meta=meta)


def _ring_points(count: int, radius: float, noise_std: float, rng) -> np.ndarray:
    theta = rng.uniform(0.0, 2.0 * np.pi, size=count)
    xy = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    return xy + noise_std * rng.standard_normal((count, 2))


def _split_counts(n: int, parts: int) -> list:
    base = n // parts
    counts = [base] * parts
    for i in range(n - base * parts):
        counts[i] += 1
    return counts


def make_circles(n: int = 400, noise_std: float = 0.08, rng=None) -> Dataset:
    """Two concentric noisy circles; outer radius 1.0 is class 0, inner 0.5 is class 1."""
    if rng is None:
        raise ParameterError("make_circles needs an rng")
    if n < 4:
        raise ParameterError(f"need n >= 4; got {n}")
    if noise_std < 0:
        raise ParameterError(f"noise_std must be >= 0; got {noise_std}")
    counts = _split_counts(n, 2)
    xy = np.concatenate([
        _ring_points(counts[0], 1.0, noise_std, rng),
        _ring_points(counts[1], 0.5, noise_std, rng),
    ])
    labels = np.concatenate([np.zeros(counts[0]), np.ones(counts[1])]).astype(np.int64)
    meta = DatasetMeta("circles", "classification", 2, counts)
    return _points_dataset(xy, labels, meta)


def make_three_rings(n: int = 300, noise_std: float = 0.12, rng=None) -> Dataset:
    """Three concentric noisy rings, radii 1.0 / 0.6 / 0.3, classes 0 / 1 / 2."""
    if rng is None:
        raise ParameterError("make_three_rings needs an rng")
    if n < 4:
        raise ParameterError(f"need n >= 4; got {n}")
    if noise_std < 0:
        raise ParameterError(f"noise_std must be >= 0; got {noise_std}")
    counts = _split_counts(n, 3)
    radii = (1.0, 0.6, 0.3)
    xy = np.concatenate([
        _ring_points(c, r, noise_std, rng) for c, r in zip(counts, radii)
    ])
    labels = np.concatenate([
        np.full(c, cls) for cls, c in enumerate(counts)
    ]).astype(np.int64)
    meta = DatasetMeta("rings3", "classification", 3, counts)
    return _points_dataset(xy, labels, meta)


def make_multilabel_synthetic(n: int = 2000, num_classes: int = 5, rng=None,
                              noise_std: float = 0.18) -> Dataset:
    """Low-dimensional multi-label task: samples superpose class prototypes.

    The prototypes are the coordinate axes of a num_classes-dimensional
    space. Each sample activates 1 to 3 labels and sits at the mean of its
    active prototypes plus gaussian noise, so co-occurring labels share
    coordinates and single-label samples sit farthest out on their own axis.
    Labels come back as a multi-hot (N, num_classes) float matrix.
    """
    if rng is None:
        raise ParameterError("make_multilabel_synthetic needs an rng")
    if num_classes < 2:
        raise ParameterError(f"need at least 2 classes; got {num_classes}")
    if n < 1:
        raise ParameterError(f"need n >= 1; got {n}")
    prototypes = np.eye(num_classes)
    labels = np.zeros((n, num_classes))
    xy = np.empty((n, num_classes))
    max_active = min(3, num_classes)
    for i in range(n):
        active = int(rng.integers(1, max_active + 1))
        chosen = rng.choice(num_classes, size=active, replace=False)
        labels[i, chosen] = 1.0
        xy[i] = (prototypes[chosen].mean(axis=0)
                 + noise_std * rng.standard_normal(num_classes))
    meta = DatasetMeta(
        "multilabel", "multilabel", num_classes,
        class_counts=labels.sum(axis=0).astype(int).tolist(),
    )
    return _points_dataset(xy, labels, meta)


# ---------------------------------------------------------------------------
# CIFAR-10 binary format
# ---------------------------------------------------------------------------


def read_cifar10_records(path: str):
    """Parse one binary batch file into (labels uint8 (M,), pixels uint8 (M, 3072))."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % RECORD_BYTES != 0:
        raise DataFormatError(
            f"{path}: size {len(raw)} is not a positive multiple of {RECORD_BYTES}"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = arr[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        offset = int(bad[0]) * RECORD_BYTES
        raise DataFormatError(
            f"{path}: label byte {labels[bad[0]]} at offset {offset} is outside 0..9"
        )
    return labels.copy(), arr[:, 1:].copy()


def write_cifar10_file(path: str, labels, images):
    """Inverse of read_cifar10_records; images are uint8 (M, 3, 32, 32)."""
    labels = np.asarray(labels)
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.ndim != 4 or images.shape[1:] != (3, 32, 32):
        raise DimensionError(f"images must be uint8 (M, 3, 32, 32); got {images.dtype} {images.shape}")
    if labels.shape != (images.shape[0],) or labels.min() < 0 or labels.max() > 9:
        raise ParameterError("labels must be one 0..9 value per image")
    records = np.empty((images.shape[0], RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = images.reshape(images.shape[0], 3072)
    with open(path, "wb") as fh:
        fh.write(records.tobytes())


def _batch_files(path: str) -> list:
    if os.path.isfile(path):
        return [path]
    if os.path.isdir(path):
        names = sorted(
            f for f in os.listdir(path)
            if f.startswith("data_batch") and f.endswith(".bin")
        )
        if not names:
            raise DataFormatError(f"{path}: no data_batch*.bin files found")
        return [os.path.join(path, f) for f in names]
    raise DataFormatError(f"{path}: no such file or directory")


def load_cifar10_subset(path: str, n_per_class: int, rng, stats=None) -> Dataset:
    """Load a stratified random subset from CIFAR-10 binary batches.

    path may be one .bin file or a directory of data_batch*.bin files.
    Pixels are normalized per channel to zero mean and unit variance using
    statistics of the selected subset; pass stats=(mean, std) to normalize
    with another subset's constants instead (the usual move for a test
    split). The per-channel constants and the post-normalization value range
    land in meta.
    """
    if n_per_class < 1:
        raise ParameterError(f"n_per_class must be >= 1; got {n_per_class}")
    labels_all = []
    pixels_all = []
    for f in _batch_files(path):
        lab, pix = read_cifar10_records(f)
        labels_all.append(lab)
        pixels_all.append(pix)
    labels_all = np.concatenate(labels_all)
    pixels_all = np.concatenate(pixels_all)

    chosen = []
    for cls in range(10):
        pool = np.flatnonzero(labels_all == cls)
        if pool.size < n_per_class:
            raise ParameterError(
                f"class {cls} has {pool.size} images, requested {n_per_class}"
            )
        pick = rng.choice(pool.size, size=n_per_class, replace=False)
        chosen.append(pool[pick])
    chosen = np.sort(np.concatenate(chosen))

    raw = pixels_all[chosen].reshape(-1, 3, 32, 32)
    labels = labels_all[chosen].astype(np.int64)
    x = raw.astype(np.float64)
    if stats is None:
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
        if np.any(std == 0.0):
            raise DataFormatError("a pixel channel is constant; cannot normalize")
    else:
        mean = np.asarray(stats[0], dtype=np.float64)
        std = np.asarray(stats[1], dtype=np.float64)
        if mean.shape != (3,) or std.shape != (3,) or np.any(std <= 0.0):
            raise ParameterError("stats must be ((3,) mean, (3,) positive std)")
    x = (x - mean.reshape(1, 3, 1, 1)) / std.reshape(1, 3, 1, 1)
    low = (0.0 - mean) / std
    high = (255.0 - mean) / std
    counts = np.bincount(labels, minlength=10).tolist()
    meta = DatasetMeta(
        "cifar10", "classification", 10, counts,
        input_range=(low, high),
        extra={"pixel_mean": mean.tolist(), "pixel_std": std.tolist()},
    )
    return Dataset(inputs=x, labels=labels, meta=meta)


# ---------------------------------------------------------------------------
# synthetic stand-in corpus in the same binary format
# ---------------------------------------------------------------------------


def _upsample_bilinear(field: np.ndarray, size: int) -> np.ndarray:
    """(C, h, w) -> (C, size, size) bilinear upsampling with edge clamping."""
    c, h, w = field.shape
    # Source coordinates for each output pixel, clamped to the valid range.
    src_i = np.clip((np.arange(size) + 0.5) * h / size - 0.5, 0.0, h - 1.0)
    src_j = np.clip((np.arange(size) + 0.5) * w / size - 0.5, 0.0, w - 1.0)
    i0 = np.floor(src_i).astype(int)
    j0 = np.floor(src_j).astype(int)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    wi = (src_i - i0).reshape(1, size, 1)
    wj = (src_j - j0).reshape(1, 1, size)
    top = field[:, i0][:, :, j0] * (1 - wj) + field[:, i0][:, :, j1] * wj
    bot = field[:, i1][:, :, j0] * (1 - wj) + field[:, i1][:, :, j1] * wj
    out = top * (1 - wi) + bot * wi
    return out


def _class_prototypes(rng, num_classes: int, modes_per_class: int) -> np.ndarray:
    # 8x8 base grids give each class a mid-frequency texture signature, so
    # classification genuinely depends on local pattern detail.
    protos = np.empty((num_classes, modes_per_class, 3, 32, 32))
    for cls in range(num_classes):
        tint = rng.uniform(-10.0, 10.0, size=(3, 1, 1))
        for m in range(modes_per_class):
            low = rng.standard_normal((3, 8, 8)) * 55.0
            protos[cls, m] = _upsample_bilinear(low, 32) + tint
    return protos


def _render_images(protos: np.ndarray, n_per_class: int, rng) -> tuple:
    num_classes, modes_per_class = protos.shape[0], protos.shape[1]
    n = n_per_class * num_classes
    images = np.empty((n, 3, 32, 32), dtype=np.uint8)
    labels = np.repeat(np.arange(num_classes), n_per_class).astype(np.int64)
    for i in range(n):
        cls = labels[i]
        mode = int(rng.integers(modes_per_class))
        amp = rng.uniform(0.6, 1.4)
        distract = _upsample_bilinear(rng.standard_normal((3, 4, 4)) * 45.0, 32)
        img = 128.0 + amp * protos[cls, mode] + distract
        img += rng.standard_normal((3, 32, 32)) * 10.0
        img = np.roll(img, shift=(int(rng.integers(-4, 5)), int(rng.integers(-4, 5))),
                      axis=(1, 2))
        images[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return images, labels


def make_image_classes(n_per_class: int, rng, num_classes: int = 10,
                       modes_per_class: int = 2) -> tuple:
    """Generate a 10-class corpus of 32x32 color images with class structure.

    Each class owns a couple of smooth prototype color fields; a sample is a
    randomly scaled prototype plus a sample-specific smooth distractor field,
    pixel noise, and a random circular shift. Meant as an offline stand-in
    with the same record format and difficulty profile as small natural-image
    subsets: learnable by a small CNN, with a real train/test gap.

    Returns (images uint8 (N, 3, 32, 32), labels int64 (N,)), class-ordered.
    """
    if n_per_class < 1:
        raise ParameterError(f"n_per_class must be >= 1; got {n_per_class}")
    protos = _class_prototypes(rng, num_classes, modes_per_class)
    return _render_images(protos, n_per_class, rng)


def write_synthetic_cifar_corpus(dir_path: str, n_train_per_class: int = 600,
                                 n_test_per_class: int = 200, seed: int = 0):
    """Write a synthetic corpus as data_batch_1.bin + test_batch.bin.

    Train and test share one set of class prototypes, so the split is i.i.d.
    Returns (train_path, test_path).
    """
    from shufflemix.sampling import make_rng

    rng = make_rng(seed)
    os.makedirs(dir_path, exist_ok=True)
    protos = _class_prototypes(rng, num_classes=10, modes_per_class=2)
    train_images, train_labels = _render_images(protos, n_train_per_class, rng)
    test_images, test_labels = _render_images(protos, n_test_per_class, rng)
    train_path = os.path.join(dir_path, "data_batch_1.bin")
    test_path = os.path.join(dir_path, "test_batch.bin")
    write_cifar10_file(train_path, train_labels, train_images)
    write_cifar10_file(test_path, test_labels, test_images)
    return train_path, test_path
