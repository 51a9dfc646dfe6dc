"""Dataset ingestion, split discipline, and the synthetic generator.

Images are stored as float32 (C, H, W) arrays with pixels in [0, 1]
(normalize_pixels / denormalize_pixels round-trip the raw 0-255 integers).
Standardization statistics are computed over the training partition at
split time and applied at the model boundary, never to stored data.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

FER_CLASS_NAMES = ["angry", "disgust", "fear", "happy", "sad", "surprise", "neutral"]
DEFAULT_USAGE_MAPPING = {"Training": "train", "PublicTest": "validation", "PrivateTest": "validation"}


class DataError(Exception):
    pass


def normalize_pixels(raw) -> np.ndarray:
    raw = np.asarray(raw)
    if raw.min() < 0 or raw.max() > 255:
        raise DataError("raw pixels must lie in [0, 255]")
    return (raw / 255.0).astype(np.float32)


def denormalize_pixels(norm) -> np.ndarray:
    return np.rint(np.asarray(norm) * 255.0).astype(np.int64)


@dataclass
class Dataset:
    """Immutable after construction; `partition` tags each example
    'train' or 'validation' (loaders honour official usage columns)."""

    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    ids: np.ndarray  # [N] int64, unique
    partition: np.ndarray  # [N] '<U10'
    num_classes: int
    class_names: list[str] | None = None

    def __post_init__(self):
        if len(set(self.ids.tolist())) != len(self.ids):
            raise DataError("example ids must be unique")

    def __len__(self):
        return len(self.ids)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class RowError:
    row: int  # 1-based data row number (header not counted)
    message: str


@dataclass
class LoadResult:
    dataset: Dataset
    row_errors: list[RowError]


@dataclass(frozen=True)
class PixelStats:
    mean: float
    std: float

    def standardize(self, images: np.ndarray) -> np.ndarray:
        return ((images - self.mean) / self.std).astype(np.float32)


@dataclass
class LabeledSplit:
    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __len__(self):
        return len(self.ids)


@dataclass
class UnlabeledSplit:
    images: np.ndarray
    ids: np.ndarray

    def __len__(self):
        return len(self.ids)


@dataclass
class DatasetSplits:
    """Disjoint labeled / unlabeled / validation sets plus the training-set
    pixel statistics used to standardize model inputs."""

    labeled: LabeledSplit
    unlabeled: UnlabeledSplit
    validation: LabeledSplit
    stats: PixelStats
    num_classes: int
    class_names: list[str] | None = None

    def check_disjoint(self) -> bool:
        a, b, c = set(self.labeled.ids.tolist()), set(self.unlabeled.ids.tolist()), set(self.validation.ids.tolist())
        return not (a & b) and not (a & c) and not (b & c)


def load_fer_csv(path, usage_mapping=None) -> LoadResult:
    """Parse the FER13-format CSV (header: emotion,pixels,usage).

    Each data row holds an integer 0-6 label, 2304 space-separated pixel
    integers (48x48 row-major) and a usage tag. Malformed rows are reported
    with their row number and skipped; valid rows are never dropped.
    """
    mapping = DEFAULT_USAGE_MAPPING if usage_mapping is None else usage_mapping
    images, labels, partitions = [], [], []
    errors: list[RowError] = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty")
        if [h.strip().lower() for h in header[:3]] != ["emotion", "pixels", "usage"]:
            raise DataError(f"unexpected header {header!r}, want emotion,pixels,usage")
        for row_no, row in enumerate(reader, start=1):
            try:
                if len(row) < 3:
                    raise ValueError(f"expected 3 fields, got {len(row)}")
                label = int(row[0])
                if not 0 <= label <= 6:
                    raise ValueError(f"label {label} out of range 0-6")
                pix = row[1].split()
                if len(pix) != 2304:
                    raise ValueError(f"expected 2304 pixels, got {len(pix)}")
                values = np.array([int(p) for p in pix], dtype=np.int64)
                if values.min() < 0 or values.max() > 255:
                    raise ValueError("pixel value out of range 0-255")
                usage = row[2].strip()
                if usage not in mapping:
                    raise ValueError(f"unknown usage tag {usage!r}")
                images.append(normalize_pixels(values.reshape(1, 48, 48)))
                labels.append(label)
                partitions.append(mapping[usage])
            except ValueError as exc:
                errors.append(RowError(row_no, str(exc)))
    n = len(images)
    dataset = Dataset(
        images=np.stack(images) if n else np.zeros((0, 1, 48, 48), dtype=np.float32),
        labels=np.array(labels, dtype=np.int64),
        ids=np.arange(n, dtype=np.int64),
        partition=np.array(partitions, dtype="<U10") if n else np.zeros(0, dtype="<U10"),
        num_classes=7,
        class_names=list(FER_CLASS_NAMES),
    )
    return LoadResult(dataset, errors)


# ---------------------------------------------------------------------------
# synthetic generator

# every pattern is symmetric under horizontal flip, so the weak-augment flip
# never moves an image across class boundaries; the first four are mutually
# confusable centered shapes, which is what makes small label budgets hard
_PATTERNS = ("plus", "cross", "ring", "diamond", "hbar", "vbar", "disc", "double_hbar", "tee", "inv_tee")


def _shape_field(kind, y, x, t, r0, rng):
    def stroke(d):
        return np.exp(-((d / t) ** 2))

    r = np.sqrt(x * x + y * y)
    if kind == "plus":
        return np.maximum(stroke(np.abs(y)), stroke(np.abs(x)))
    if kind == "cross":
        return np.maximum(stroke(np.abs(y - x) / np.sqrt(2)), stroke(np.abs(y + x) / np.sqrt(2)))
    if kind == "ring":
        return stroke(np.abs(r - r0))
    if kind == "diamond":
        return stroke(np.abs(np.abs(x) + np.abs(y) - r0))
    if kind == "hbar":
        return stroke(np.abs(y))
    if kind == "vbar":
        return stroke(np.abs(x))
    if kind == "disc":
        return 1.0 / (1.0 + np.exp((r - r0 * 0.8) / (t * 0.4)))
    if kind == "double_hbar":
        return np.maximum(stroke(np.abs(y - r0 * 0.7)), stroke(np.abs(y + r0 * 0.7)))
    if kind == "tee":
        return np.maximum(stroke(np.abs(y + r0 * 0.7)), stroke(np.abs(x)) * (y > -r0 * 0.7))
    if kind == "inv_tee":
        return np.maximum(stroke(np.abs(y - r0 * 0.7)), stroke(np.abs(x)) * (y < r0 * 0.7))
    raise DataError(f"unknown pattern {kind}")


def _render_pattern(kind, size, rng, noise):
    lin = np.linspace(-1.0, 1.0, size)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    # wide appearance jitter: position, scale, stroke width, contrast all vary,
    # so a handful of labels per class cannot cover the appearance manifold
    cy = rng.uniform(-0.42, 0.42)
    cx = rng.uniform(-0.42, 0.42)
    t = rng.uniform(0.07, 0.36)  # stroke half-width
    r0 = rng.uniform(0.28, 0.75)  # characteristic radius
    scale = rng.uniform(0.50, 1.25)
    y, x = (yy - cy) / scale, (xx - cx) / scale
    img = _shape_field(kind, y, x, t, r0, rng)

    # an uninformative distractor stroke at random orientation and offset
    theta = rng.uniform(0.0, np.pi)
    off = rng.uniform(-0.8, 0.8)
    d = np.abs(np.cos(theta) * yy - np.sin(theta) * xx - off)
    img = np.maximum(img, rng.uniform(0.3, 0.7) * np.exp(-((d / rng.uniform(0.05, 0.12)) ** 2)))

    amplitude = rng.uniform(0.40, 1.0)
    background = rng.uniform(0.05, 0.25)
    img = background + amplitude * img
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None, :, :]


def generate_synthetic(n_per_class: int, n_classes: int, image_size: int, seed: int, noise: float = 0.12) -> Dataset:
    """Procedural dataset: one flip-invariant pattern per class with jitter
    in position, stroke width, scale, intensity, and additive pixel noise.
    Exactly balanced; deterministic per seed; all examples tagged 'train'.
    """
    if n_classes < 2:
        raise DataError(f"n_classes must be >= 2, got {n_classes}")
    if n_classes > len(_PATTERNS):
        raise DataError(f"at most {len(_PATTERNS)} synthetic classes supported, got {n_classes}")
    if image_size < 8:
        raise DataError(f"image_size must be >= 8, got {image_size}")
    if n_per_class < 1:
        raise DataError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for c in range(n_classes):
        for _ in range(n_per_class):
            images.append(_render_pattern(_PATTERNS[c], image_size, rng, noise))
            labels.append(c)
    n = len(images)
    order = np.random.default_rng(seed + 1).permutation(n)
    return Dataset(
        images=np.stack(images)[order],
        labels=np.array(labels, dtype=np.int64)[order],
        ids=np.arange(n, dtype=np.int64),
        partition=np.full(n, "train", dtype="<U10"),
        num_classes=n_classes,
        class_names=[_PATTERNS[c] for c in range(n_classes)],
    )


# ---------------------------------------------------------------------------
# splits


def make_splits(dataset: Dataset, n_labels_per_class: int | None, validation_fraction: float = 0.1, seed: int = 0) -> DatasetSplits:
    """Hold out validation first (official partition if present, else a
    stratified fraction), then draw exactly n labeled examples per class;
    everything else becomes the unlabeled pool with labels stripped.

    Pass ``n_labels_per_class=None`` to keep every training label (the
    fully-supervised setting; the unlabeled pool is then empty).
    """
    rng = np.random.default_rng(seed)
    idx = np.arange(len(dataset))
    has_official = bool(np.any(dataset.partition == "validation"))
    if has_official:
        val_idx = idx[dataset.partition == "validation"]
        train_idx = idx[dataset.partition == "train"]
    else:
        val_parts = []
        train_parts = []
        for c in range(dataset.num_classes):
            members = idx[dataset.labels == c]
            members = members[rng.permutation(len(members))]
            n_val = int(round(len(members) * validation_fraction))
            val_parts.append(members[:n_val])
            train_parts.append(members[n_val:])
        val_idx = np.concatenate(val_parts)
        train_idx = np.concatenate(train_parts)
    val_idx = np.sort(val_idx)
    train_idx = np.sort(train_idx)

    if n_labels_per_class is None:
        labeled_idx = train_idx
        unlabeled_idx = np.zeros(0, dtype=np.int64)
    else:
        chosen = []
        for c in range(dataset.num_classes):
            members = train_idx[dataset.labels[train_idx] == c]
            if len(members) < n_labels_per_class:
                name = dataset.class_names[c] if dataset.class_names else str(c)
                raise DataError(
                    f"class {name!r} has only {len(members)} training examples, "
                    f"need {n_labels_per_class}"
                )
            pick = rng.choice(len(members), size=n_labels_per_class, replace=False)
            chosen.append(members[pick])
        labeled_idx = np.sort(np.concatenate(chosen))
        unlabeled_idx = np.setdiff1d(train_idx, labeled_idx)

    train_images = dataset.images[train_idx]
    stats = PixelStats(mean=float(train_images.mean()), std=float(max(train_images.std(), 1e-6)))
    splits = DatasetSplits(
        labeled=LabeledSplit(dataset.images[labeled_idx], dataset.labels[labeled_idx], dataset.ids[labeled_idx]),
        unlabeled=UnlabeledSplit(dataset.images[unlabeled_idx], dataset.ids[unlabeled_idx]),
        validation=LabeledSplit(dataset.images[val_idx], dataset.labels[val_idx], dataset.ids[val_idx]),
        stats=stats,
        num_classes=dataset.num_classes,
        class_names=dataset.class_names,
    )
    assert splits.check_disjoint()
    return splits


def save_split_manifest(splits: DatasetSplits, path):
    import json

    with open(path, "w") as fh:
        json.dump(
            {
                "labeled_ids": splits.labeled.ids.tolist(),
                "unlabeled_ids": splits.unlabeled.ids.tolist(),
                "validation_ids": splits.validation.ids.tolist(),
            },
            fh,
        )


def load_split_manifest(dataset: Dataset, path) -> DatasetSplits:
    import json

    with open(path) as fh:
        manifest = json.load(fh)
    by_id = {int(i): k for k, i in enumerate(dataset.ids)}

    def rows(ids):
        return np.array([by_id[i] for i in ids], dtype=np.int64)

    lab = rows(manifest["labeled_ids"])
    unl = rows(manifest["unlabeled_ids"])
    val = rows(manifest["validation_ids"])
    # same element order as make_splits so the float32 statistics match exactly
    train_rows = np.sort(np.concatenate([lab, unl]))
    train_images = dataset.images[train_rows]
    stats = PixelStats(mean=float(train_images.mean()), std=float(max(train_images.std(), 1e-6)))
    splits = DatasetSplits(
        labeled=LabeledSplit(dataset.images[lab], dataset.labels[lab], dataset.ids[lab]),
        unlabeled=UnlabeledSplit(dataset.images[unl], dataset.ids[unl]),
        validation=LabeledSplit(dataset.images[val], dataset.labels[val], dataset.ids[val]),
        stats=stats,
        num_classes=dataset.num_classes,
        class_names=dataset.class_names,
    )
    assert splits.check_disjoint()
    return splits


def load_image_directory(path) -> Dataset:
    """Directory-per-class loader for licensed datasets (needs Pillow).

    Layout: path/<class_name>/*.png|jpg|... ; class names are the sorted
    subdirectory names. All images must share one size; color images are
    converted to grayscale.
    """
    try:
        from PIL import Image
    except ImportError as exc:
        raise DataError("load_image_directory requires Pillow (pip install ssllab[images])") from exc

    classes = sorted(d for d in os.listdir(path) if os.path.isdir(os.path.join(path, d)))
    if len(classes) < 2:
        raise DataError(f"{path} must contain one subdirectory per class (>= 2)")
    images, labels = [], []
    shape = None
    for c, name in enumerate(classes):
        sub = os.path.join(path, name)
        for fname in sorted(os.listdir(sub)):
            full = os.path.join(sub, fname)
            try:
                with Image.open(full) as im:
                    arr = np.asarray(im.convert("L"), dtype=np.float32)
            except Exception as exc:
                raise DataError(f"cannot read image {full}: {exc}") from exc
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise DataError(f"{full} has size {arr.shape}, expected {shape}")
            images.append((arr / 255.0).astype(np.float32)[None])
            labels.append(c)
    if not images:
        raise DataError(f"no images found under {path}")
    n = len(images)
    return Dataset(
        images=np.stack(images),
        labels=np.array(labels, dtype=np.int64),
        ids=np.arange(n, dtype=np.int64),
        partition=np.full(n, "train", dtype="<U10"),
        num_classes=len(classes),
        class_names=classes,
    )
