"""Dataset ingestion and session materialization.

Archives are read in the published compressed-array layout (train/test image
and label arrays, uint8 pixels); nothing is downloaded here. The synthetic
generator builds colored geometric patterns so rotations and channel
permutations act nontrivially on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import SessionSchedule
from .exceptions import DataError, FormatError


@dataclass
class DatasetStore:
    """In-memory train/test arrays with [0,1] pixels and flat int labels."""

    train_images: np.ndarray    # (N, H, W, C)
    train_labels: np.ndarray    # (N,)
    test_images: np.ndarray
    test_labels: np.ndarray
    resolution: int
    channels: int

    def __post_init__(self):
        for name in ("train", "test"):
            images = getattr(self, f"{name}_images")
            labels = getattr(self, f"{name}_labels")
            if images.ndim != 4:
                raise FormatError(f"{name}_images must be (N, H, W, C)")
            if images.shape[0] != labels.shape[0]:
                raise FormatError(f"{name} image/label counts differ")
            if images.shape[0] == 0:
                raise FormatError(f"{name} split is empty")

    @property
    def num_classes(self) -> int:
        return int(max(self.train_labels.max(), self.test_labels.max())) + 1

    def train_class_indices(self, cls: int) -> np.ndarray:
        return np.flatnonzero(self.train_labels == cls)

    def test_class_indices(self, cls: int) -> np.ndarray:
        return np.flatnonzero(self.test_labels == cls)


_ARCHIVE_KEYS = ("train_images", "train_labels", "test_images", "test_labels")


def load_medmnist_archive(path: str) -> DatasetStore:
    """Load a MedMNIST-convention .npz archive into a DatasetStore."""
    try:
        archive = np.load(path)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read archive {path}: {exc}") from None
    arrays = {}
    for key in _ARCHIVE_KEYS:
        if key not in archive:
            raise FormatError(f"archive {path} is missing key {key!r}")
        arrays[key] = archive[key]

    def _scale(images, key):
        if images.ndim == 3:        # grayscale stored without channel axis
            images = images[..., None]
        if images.ndim != 4:
            raise FormatError(f"{key} has shape {images.shape}, expected 3-D or 4-D")
        if images.shape[1] != images.shape[2]:
            raise FormatError(f"{key} images are not square: {images.shape}")
        if np.issubdtype(images.dtype, np.integer):
            return images.astype(np.float32) / 255.0
        return np.clip(images.astype(np.float32), 0.0, 1.0)

    train_images = _scale(arrays["train_images"], "train_images")
    test_images = _scale(arrays["test_images"], "test_images")
    if train_images.shape[1:] != test_images.shape[1:]:
        raise FormatError("train and test image shapes differ")
    train_labels = arrays["train_labels"].reshape(-1).astype(np.int64)
    test_labels = arrays["test_labels"].reshape(-1).astype(np.int64)
    return DatasetStore(train_images, train_labels, test_images, test_labels,
                        resolution=train_images.shape[1],
                        channels=train_images.shape[3])


@dataclass
class SessionData:
    """Materialized train set for one session plus its cumulative test set."""

    session: int
    classes: list
    train_ids: np.ndarray       # global train indices, the sample ids
    train_labels: np.ndarray
    test_indices: np.ndarray    # cumulative over all seen classes
    test_labels: np.ndarray


def materialize_sessions(store: DatasetStore, schedule: SessionSchedule,
                         seed: int) -> list[SessionData]:
    """Subsample the store into the scheduled per-session sets.

    Train ids never repeat across sessions; test sets are cumulative unions
    of the full test split of every seen class.
    """
    if store.num_classes < schedule.total_classes:
        raise DataError(
            f"store has {store.num_classes} classes, schedule needs "
            f"{schedule.total_classes}")
    rng = np.random.default_rng(seed)
    sessions = []
    for t in range(schedule.num_sessions):
        classes = schedule.classes_for_session(t)
        want = schedule.samples_for_session(t)
        ids = []
        for cls in classes:
            pool = store.train_class_indices(cls)
            if pool.size < want:
                raise DataError(
                    f"class {cls}: {pool.size} train samples available, "
                    f"schedule needs {want}")
            picked = rng.choice(pool, size=want, replace=False)
            ids.append(np.sort(picked))
        train_ids = np.concatenate(ids) if ids else np.empty(0, dtype=np.int64)
        seen = schedule.seen_classes(t)
        test_idx = np.concatenate([store.test_class_indices(c) for c in seen])
        sessions.append(SessionData(
            session=t,
            classes=classes,
            train_ids=train_ids,
            train_labels=store.train_labels[train_ids],
            test_indices=test_idx,
            test_labels=store.test_labels[test_idx],
        ))
    return sessions


# -- synthetic data --------------------------------------------------------

# distinct fully-saturated hues, cycled per class
_HUES = np.array([
    (0.9, 0.2, 0.2), (0.2, 0.9, 0.2), (0.2, 0.2, 0.9), (0.9, 0.9, 0.2),
    (0.9, 0.2, 0.9), (0.2, 0.9, 0.9), (0.9, 0.6, 0.2), (0.6, 0.2, 0.9),
])


def _pattern_mask(kind: int, n: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n]
    cx = (n - 1) / 2.0
    r = np.hypot(yy - cx, xx - cx)
    if kind == 0:       # vertical bars
        return (xx // max(2, n // 8)) % 2 == 0
    if kind == 1:       # horizontal bars
        return (yy // max(2, n // 8)) % 2 == 0
    if kind == 2:       # filled disk
        return r <= n / 3.0
    if kind == 3:       # checkerboard
        cell = max(2, n // 4)
        return ((yy // cell) + (xx // cell)) % 2 == 0
    if kind == 4:       # diagonal stripes
        return ((yy + xx) // max(2, n // 8)) % 2 == 0
    if kind == 5:       # ring
        return (r <= n / 2.5) & (r >= n / 4.0)
    if kind == 6:       # top-left square
        return (yy < n // 2) & (xx < n // 2)
    # cross
    w = max(1, n // 6)
    return (np.abs(yy - cx) <= w) | (np.abs(xx - cx) <= w)


def class_template(cls: int, resolution: int) -> np.ndarray:
    """Noise-free class image: hue + geometric pattern on a dim background."""
    color = _HUES[cls % len(_HUES)]
    mask = _pattern_mask(cls % 8, resolution)
    image = np.full((resolution, resolution, 3), 0.15, dtype=np.float32)
    image[mask] = color
    return image


def generate_synthetic(num_classes: int, per_class: int, resolution: int,
                       seed: int, noise: float = 0.1,
                       test_per_class: int = 40) -> DatasetStore:
    """Class-conditional colored patterns with additive Gaussian noise.

    At zero noise every image equals its class template, so a nearest-mean
    pixel classifier is exact by construction.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 1 or test_per_class < 1:
        raise ValueError("per-class counts must be positive")
    rng = np.random.default_rng(seed)

    def _split(count):
        images = np.empty((num_classes * count, resolution, resolution, 3),
                          dtype=np.float32)
        labels = np.empty(num_classes * count, dtype=np.int64)
        row = 0
        for cls in range(num_classes):
            template = class_template(cls, resolution)
            for _ in range(count):
                img = template
                if noise > 0:
                    img = img + rng.normal(0.0, noise, template.shape).astype(np.float32)
                    img = np.clip(img, 0.0, 1.0)
                images[row] = img
                labels[row] = cls
                row += 1
        return images, labels

    train_images, train_labels = _split(per_class)
    test_images, test_labels = _split(test_per_class)
    return DatasetStore(train_images, train_labels, test_images, test_labels,
                        resolution=resolution, channels=3)


def nearest_template_accuracy(store: DatasetStore) -> float:
    """Accuracy of the trivial nearest-class-template pixel classifier."""
    templates = np.stack([
        class_template(c, store.resolution).reshape(-1)
        for c in range(store.num_classes)])
    flat = store.test_images.reshape(store.test_images.shape[0], -1)
    d = ((flat[:, None, :] - templates[None, :, :]) ** 2).sum(axis=2)
    preds = d.argmin(axis=1)
    return 100.0 * float((preds == store.test_labels).mean())
