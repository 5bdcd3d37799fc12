"""Indexed datasets: CIFAR-10 binary ingestion, synthetic oracle datasets,
seeded batching and train-time augmentation."""
from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import IngestionError, ValidationError

log = logging.getLogger(__name__)

CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
RECORDS_PER_FILE = 10000


@dataclass
class IndexedDataset:
    images: np.ndarray  # float32, N x C x H x W, values in [0, 1]
    labels: np.ndarray  # int64
    ids: np.ndarray  # int64, unique and stable
    num_classes: int
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        n = len(self.images)
        if self.images.ndim != 4:
            raise ValidationError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.labels) != n or len(self.ids) != n:
            raise ValidationError("images, labels and ids must have equal length")
        if n and (self.images.min() < 0 or self.images.max() > 1):
            raise ValidationError("pixel values must lie in [0, 1]")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError("labels out of range")
        if len(np.unique(self.ids)) != n:
            raise ValidationError("example ids must be unique")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, index, split=None) -> "IndexedDataset":
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.int64)
        return IndexedDataset(self.images[index], self.labels[index], self.ids[index],
                              self.num_classes, split or self.split, dict(self.meta))


def _balanced_prefix(labels: np.ndarray, limit: int, num_classes: int) -> np.ndarray:
    """Indices of the first ``limit`` records, spread evenly over classes.

    The first ``limit % num_classes`` classes take one extra record.
    """
    quota = np.full(num_classes, limit // num_classes)
    quota[: limit % num_classes] += 1
    taken = np.zeros(num_classes, dtype=np.int64)
    keep = []
    for i, c in enumerate(labels):
        if taken[c] < quota[c]:
            taken[c] += 1
            keep.append(i)
            if len(keep) == limit:
                break
    if len(keep) < limit:
        raise IngestionError(f"only {len(keep)} records available for a balanced limit of {limit}")
    return np.asarray(keep, dtype=np.int64)


def _read_cifar_file(fname: str) -> np.ndarray:
    if not os.path.exists(fname):
        raise IngestionError(f"missing CIFAR-10 file: {fname}")
    raw = np.fromfile(fname, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise IngestionError(
            f"corrupt CIFAR-10 file {fname}: {raw.size} bytes is not a multiple of {CIFAR_RECORD}"
        )
    if raw.size != RECORDS_PER_FILE * CIFAR_RECORD:
        warnings.warn(f"{fname}: expected {RECORDS_PER_FILE} records, found {raw.size // CIFAR_RECORD}")
    return raw.reshape(-1, CIFAR_RECORD)


def load_cifar10(path, limit: int | None = None, split: str = "train") -> IndexedDataset:
    """Read the CIFAR-10 binary batches under ``path``.

    ``limit`` keeps a class-balanced prefix in file order. Example ids are the
    record's position in the concatenated split.
    """
    files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    records = np.concatenate([_read_cifar_file(os.path.join(path, f)) for f in files])
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise IngestionError(f"label byte {labels.max()} out of range in {path}")
    index = np.arange(len(records))
    if limit is not None:
        index = _balanced_prefix(labels, int(limit), 10)
    images = records[index, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float32) / 255.0
    log.info("loaded %d CIFAR-10 %s records from %s", len(index), split, path)
    return IndexedDataset(images, labels[index], index, 10, split,
                          {"source": "cifar10", "path": str(path)})


def _balanced_labels(n: int, num_classes: int, rng) -> np.ndarray:
    labels = np.arange(n) % num_classes
    return rng.permutation(labels)


def make_synthetic(n: int, num_classes: int, geometry: str = "gaussian_blobs", seed: int = 0,
                   image_shape=(3, 8, 8), margin: float = 0.05, spread: float = 0.05,
                   noise: float = 0.15, split: str = "train") -> IndexedDataset:
    """Synthetic image datasets for tests and desk runs.

    ``gaussian_blobs``: per-class mean images plus Gaussian noise, clipped to [0, 1].

    ``linear_margin``: the flattened pixels are split into one block per class.
    A class-``y`` sample is bright (``0.5 + margin + U(0, spread)``) on block
    ``y`` and dark (``0.5 - margin - U(0, spread)``) on the other class blocks.
    The linear classifier that averages each block (``meta["weight"]``) has, for
    every sample, an L-inf distance to its decision boundary of at least
    ``margin``; exact per-sample distances are in ``meta["distances"]``.
    """
    if n < num_classes:
        raise ValidationError(f"need at least one example per class (n={n}, L={num_classes})")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, num_classes, rng)
    shape = tuple(image_shape)
    d = int(np.prod(shape))
    meta = {"source": "synthetic", "geometry": geometry, "seed": seed}
    if geometry == "gaussian_blobs":
        means = rng.uniform(0.2, 0.8, size=(num_classes, d))
        flat = means[labels] + noise * rng.standard_normal((n, d))
        images = np.clip(flat, 0.0, 1.0)
    elif geometry == "linear_margin":
        k = d // num_classes
        if k < 1:
            raise ValidationError("image too small for one pixel block per class")
        if not (0 < margin and margin + spread < 0.5):
            raise ValidationError("need 0 < margin and margin + spread < 0.5")
        weight = np.zeros((num_classes, d))
        for c in range(num_classes):
            weight[c, c * k:(c + 1) * k] = 1.0 / k
        images = rng.uniform(0.25, 0.75, size=(n, d))
        owned = num_classes * k
        lo = 0.5 - margin - rng.uniform(0, spread, size=(n, owned))
        images[:, :owned] = lo
        for i, y in enumerate(labels):
            images[i, y * k:(y + 1) * k] = 0.5 + margin + rng.uniform(0, spread, size=k)
        # distances are measured on the float32 pixels that are actually stored
        images = images.astype(np.float32).astype(np.float64)
        scores = images @ weight.T
        true = scores[np.arange(n), labels]
        gap = true[:, None] - scores
        gap[np.arange(n), labels] = np.inf
        # ||w_y - w_c||_1 = 2 for disjoint equal-size blocks
        distances = gap.min(axis=1) / 2.0
        meta.update(weight=weight, distances=distances, margin=float(distances.min()),
                    max_margin=float(distances.max()))
    else:
        raise ValidationError(f"unknown geometry {geometry!r}")
    return IndexedDataset(images.reshape(n, *shape).astype(np.float32), labels,
                          np.arange(n), num_classes, split, meta)


def linear_margin_model(data: IndexedDataset, dtype=torch.float64):
    """The block-averaging linear classifier a ``linear_margin`` dataset was built for."""
    from .models import LinearClassifier

    w = torch.as_tensor(data.meta["weight"], dtype=torch.float64)
    model = LinearClassifier(data.num_classes, data.image_shape, weight=w)
    return model.to(dtype)


def save_dataset(path, data: IndexedDataset):
    arrays = {"images": data.images, "labels": data.labels, "ids": data.ids,
              "num_classes": np.asarray(data.num_classes), "split": np.asarray(data.split)}
    for k, v in data.meta.items():
        if isinstance(v, np.ndarray) or np.isscalar(v):
            arrays[f"meta_{k}"] = np.asarray(v)
    np.savez_compressed(path, **arrays)


def load_dataset(path) -> IndexedDataset:
    with np.load(path, allow_pickle=False) as z:
        meta = {}
        for k in z.files:
            if k.startswith("meta_"):
                v = z[k]
                meta[k[5:]] = v.item() if v.ndim == 0 else v
        return IndexedDataset(z["images"], z["labels"], z["ids"], int(z["num_classes"]),
                              str(z["split"]), meta)


def split_holdout(data: IndexedDataset, fraction: float, seed: int = 0):
    """Random (train, holdout) partition; ids are preserved."""
    if not 0 <= fraction < 1:
        raise ValidationError("holdout fraction must lie in [0, 1)")
    n_hold = int(round(len(data) * fraction))
    perm = np.random.default_rng(seed).permutation(len(data))
    hold, train = np.sort(perm[:n_hold]), np.sort(perm[n_hold:])
    return data.subset(train, "train"), data.subset(hold, "holdout")


def batch_iterator(data: IndexedDataset, batch_size: int, shuffle: bool = True, seed=0):
    """Yield ``(ids, images, labels)`` torch batches covering every example once.

    The order depends only on ``seed`` (an int or a sequence of ints).
    """
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    order = np.arange(len(data))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(data))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield (torch.from_numpy(data.ids[idx]), torch.from_numpy(data.images[idx]),
               torch.from_numpy(data.labels[idx]))


def augment_batch(images: torch.Tensor, rng: np.random.Generator,
                  pad: int | None = None) -> torch.Tensor:
    """Random crop from a zero-padded copy plus random horizontal flip.

    ``pad`` defaults to an eighth of the height (4 pixels at 32x32).
    """
    b, c, h, w = images.shape
    if pad is None:
        pad = max(1, h // 8)
    padded = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    padded[:, :, pad:pad + h, pad:pad + w] = images.numpy()
    dy = rng.integers(0, 2 * pad + 1, size=b)
    dx = rng.integers(0, 2 * pad + 1, size=b)
    flip = rng.random(b) < 0.5
    out = np.empty((b, c, h, w), dtype=np.float32)
    for i in range(b):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return torch.from_numpy(out)
