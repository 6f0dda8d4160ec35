"""
Datasets, patch geometry and ground-truth masks.

Mask polarity is global: 0 marks an adversarial (patch) pixel, 1 a benign one.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import BadMagicError, CountMismatchError, DataFormatError, PatchSpecError, ShapeError, TruncatedFileError
from .models import DataConfig, PatchShape

logger = logging.getLogger(__name__)

Split = Literal["train", "val", "test"]
SeedLike = Union[int, Sequence[int]]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_SIDE = 32
CIFAR_CLASSES = ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"]

# Filled fraction of the bounding box, used to seed the size search.
_FILL_RATIO = {"rectangle": 1.0, "square": 1.0, "diamond": 0.5, "octagon": 7.0 / 9.0}


@dataclass(frozen=True)
class Example:
    image: np.ndarray
    label: int


@dataclass(eq=False)
class Dataset:
    images: np.ndarray  # [N,C,H,W] float32 in [0,1]
    labels: np.ndarray  # [N] int64
    mean: np.ndarray  # [C], always from the train split
    split: Split
    class_names: List[str]

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def __getitem__(self, index: int) -> Example:
        return Example(image=self.images[index], label=int(self.labels[index]))

    def __iter__(self) -> Iterator[Example]:
        return (self[i] for i in range(len(self)))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def channels(self) -> int:
        return int(self.images.shape[1])

    @property
    def image_size(self) -> Tuple[int, int]:
        return int(self.images.shape[2]), int(self.images.shape[3])

    def subset(self, indices: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx])

    def with_mean(self, mean: np.ndarray, split: Optional[Split] = None) -> "Dataset":
        return replace(self, mean=np.asarray(mean, dtype=np.float32), split=split or self.split)


@dataclass(eq=False)
class DatasetSplits:
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass(frozen=True)
class PatchSpec:
    x: int  # row offset
    y: int  # column offset
    h: int
    w: int
    shape: PatchShape = "square"

    def validate(self, height: int, width: int) -> "PatchSpec":
        if self.h < 1 or self.w < 1 or self.x < 0 or self.y < 0 or self.x + self.h > height or self.y + self.w > width:
            raise PatchSpecError(f"{self} does not fit a {height}x{width} image")
        return self


def dataset_mean(train: Dataset) -> np.ndarray:
    if len(train) == 0:
        raise DataFormatError("cannot compute the mean pixel of an empty dataset")
    return train.images.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)


def dataset_digest(dataset: Dataset) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(dataset.images).tobytes())
    digest.update(np.ascontiguousarray(dataset.labels).tobytes())
    return digest.hexdigest()


def _shape_region(name: str, dy: np.ndarray, dx: np.ndarray, radius: float) -> np.ndarray:
    if name == "circle":
        return dy**2 + dx**2 <= radius**2
    if name == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.8 * radius
    if name == "triangle":
        half_width = (dy + radius) / (1.8 * radius) * radius
        return (dy >= -radius) & (dy <= 0.8 * radius) & (np.abs(dx) <= half_width)
    if name == "cross":
        arm = radius / 3.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= radius)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= radius))
    raise ValueError(f"unknown shape class: {name}")


def gen_shapes_dataset(
    n_per_class: int,
    classes: Sequence[str] = ("circle", "square", "triangle", "cross"),
    image_size: int = 32,
    seed: SeedLike = 0,
    split: Split = "train",
) -> Dataset:
    """One jittered filled shape per image on a random background, plus sigma=0.02 noise."""
    if image_size % 4:
        raise ShapeError(f"image_size must be divisible by 4, got {image_size}")
    rng = np.random.default_rng(seed)
    size = image_size
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    images = np.empty((len(classes) * n_per_class, 3, size, size), dtype=np.float32)
    labels = np.empty(len(classes) * n_per_class, dtype=np.int64)

    index = 0
    for label, name in enumerate(classes):
        for _ in range(n_per_class):
            background = rng.uniform(0.0, 1.0, 3)
            foreground = rng.uniform(0.0, 1.0, 3)
            while np.linalg.norm(foreground - background) < 0.2:
                foreground = rng.uniform(0.0, 1.0, 3)
            center_r = size / 2 + rng.uniform(-size / 8, size / 8)
            center_c = size / 2 + rng.uniform(-size / 8, size / 8)
            radius = rng.uniform(0.22, 0.32) * size
            region = _shape_region(name, rows - center_r, cols - center_c, radius)
            image = np.where(region[None], foreground[:, None, None], background[:, None, None])
            image = image + rng.normal(0.0, 0.02, image.shape)
            images[index] = np.clip(image, 0.0, 1.0)
            labels[index] = label
            index += 1

    order = rng.permutation(len(labels))
    images, labels = images[order], labels[order]
    dataset = Dataset(images=images, labels=labels, mean=np.zeros(3, np.float32), split=split, class_names=list(classes))
    return dataset.with_mean(dataset_mean(dataset))


def gen_shapes_splits(cfg: DataConfig, seed: int) -> DatasetSplits:
    train = gen_shapes_dataset(cfg.n_train_per_class, cfg.classes, cfg.image_size, [seed, 0], "train")
    val = gen_shapes_dataset(cfg.n_val_per_class, cfg.classes, cfg.image_size, [seed, 1], "val")
    test = gen_shapes_dataset(cfg.n_test_per_class, cfg.classes, cfg.image_size, [seed, 2], "test")
    return DatasetSplits(train=train, val=val.with_mean(train.mean), test=test.with_mean(train.mean))


def _read_header(raw: bytes, fmt: str, path: Path) -> Tuple[int, ...]:
    size = struct.calcsize(fmt)
    if len(raw) < size:
        raise TruncatedFileError(f"{path}: header needs {size} bytes, file has {len(raw)}")
    return struct.unpack(fmt, raw[:size])


def load_idx(images_path: str | Path, labels_path: str | Path, split: Split = "train") -> Dataset:
    """IDX images (magic 0x803) and labels (0x801); grayscale is replicated to 3 channels."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    raw_images = images_path.read_bytes()
    raw_labels = labels_path.read_bytes()

    (magic,) = _read_header(raw_images, ">I", images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise BadMagicError(f"{images_path}: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")
    _, count, rows, cols = _read_header(raw_images, ">IIII", images_path)
    pixels = count * rows * cols
    if len(raw_images) < 16 + pixels:
        raise TruncatedFileError(f"{images_path}: expected {pixels} pixel bytes, found {len(raw_images) - 16}")

    (magic,) = _read_header(raw_labels, ">I", labels_path)
    if magic != IDX_LABELS_MAGIC:
        raise BadMagicError(f"{labels_path}: magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")
    _, label_count = _read_header(raw_labels, ">II", labels_path)
    if len(raw_labels) < 8 + label_count:
        raise TruncatedFileError(f"{labels_path}: expected {label_count} label bytes, found {len(raw_labels) - 8}")
    if label_count != count:
        raise CountMismatchError(f"{count} images but {label_count} labels")

    gray = np.frombuffer(raw_images, dtype=np.uint8, count=pixels, offset=16).reshape(count, 1, rows, cols)
    images = np.repeat(gray.astype(np.float32) / np.float32(255.0), 3, axis=1)
    labels = np.frombuffer(raw_labels, dtype=np.uint8, count=label_count, offset=8).astype(np.int64)
    num_classes = max(10, int(labels.max()) + 1) if count else 10
    dataset = Dataset(images=images, labels=labels, mean=np.zeros(3, np.float32), split=split, class_names=[str(i) for i in range(num_classes)])
    logger.info("Loaded %d IDX examples (%dx%d) from %s", count, rows, cols, images_path)
    return dataset.with_mean(dataset_mean(dataset)) if count else dataset


def load_cifar_binary(path: str | Path, split: Split = "train") -> Dataset:
    """CIFAR-10 binary: 1 label byte + 3072 channel-major pixel bytes per record."""
    path = Path(path)
    raw = path.read_bytes()
    if not raw:
        raise TruncatedFileError(f"{path}: empty file")
    if len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if np.any(labels >= len(CIFAR_CLASSES)):
        raise DataFormatError(f"{path}: label byte >= {len(CIFAR_CLASSES)}")
    images = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float32) / np.float32(255.0)
    dataset = Dataset(images=images, labels=labels, mean=np.zeros(3, np.float32), split=split, class_names=list(CIFAR_CLASSES))
    logger.info("Loaded %d CIFAR records from %s", len(labels), path)
    return dataset.with_mean(dataset_mean(dataset))


def _to_bytes(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)


def save_idx(dataset: Dataset, images_path: str | Path, labels_path: str | Path) -> None:
    """Write channel 0 as IDX bytes (inverse of `load_idx` for byte-quantized images)."""
    count, _, rows, cols = dataset.images.shape
    header = struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols)
    Path(images_path).write_bytes(header + _to_bytes(dataset.images[:, 0]).tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, count) + dataset.labels.astype(np.uint8).tobytes())


def save_cifar_binary(dataset: Dataset, path: str | Path) -> None:
    if dataset.images.shape[1:] != (3, CIFAR_SIDE, CIFAR_SIDE):
        raise ShapeError(f"CIFAR records need [3,32,32] images, got {list(dataset.images.shape[1:])}")
    records = np.concatenate(
        [dataset.labels.astype(np.uint8)[:, None], _to_bytes(dataset.images).reshape(len(dataset), -1)], axis=1
    )
    Path(path).write_bytes(records.tobytes())


def save_npz(dataset: Dataset, path: str | Path) -> None:
    np.savez(
        path,
        images=dataset.images,
        labels=dataset.labels,
        mean=dataset.mean,
        class_names=np.asarray(dataset.class_names),
        split=np.asarray(dataset.split),
    )


def load_npz(path: str | Path) -> Dataset:
    with np.load(path, allow_pickle=False) as archive:
        return Dataset(
            images=archive["images"].astype(np.float32),
            labels=archive["labels"].astype(np.int64),
            mean=archive["mean"].astype(np.float32),
            split=str(archive["split"]),
            class_names=[str(name) for name in archive["class_names"]],
        )


def _split_off(dataset: Dataset, fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    order = np.random.default_rng([seed, 7]).permutation(len(dataset))
    cut = max(1, int(round(len(dataset) * fraction)))
    return dataset.subset(np.sort(order[cut:])), dataset.subset(np.sort(order[:cut]))


def build_splits(cfg: DataConfig, seed: int) -> DatasetSplits:
    """Train/val/test for the configured source; val/test always carry the train mean."""
    if cfg.source == "shapes":
        return gen_shapes_splits(cfg, seed)
    if cfg.source == "idx":
        full = load_idx(cfg.train_images, cfg.train_labels)
        test = load_idx(cfg.test_images, cfg.test_labels, "test") if cfg.test_images and cfg.test_labels else None
    else:
        full = load_cifar_binary(cfg.train_images)
        test = load_cifar_binary(cfg.test_images, "test") if cfg.test_images else None
    train, val = _split_off(full, cfg.val_fraction, seed)
    if test is None:
        train, test = _split_off(train, cfg.val_fraction, seed + 1)
    train = train.with_mean(dataset_mean(train), "train")
    return DatasetSplits(train=train, val=val.with_mean(train.mean, "val"), test=test.with_mean(train.mean, "test"))


@lru_cache(maxsize=4096)
def shape_pixel_count(shape: PatchShape, h: int, w: int) -> int:
    return int((rasterize_mask(PatchSpec(0, 0, h, w, shape), h, w) == 0).sum())


def _best_box(shape: PatchShape, target: float, height: int, width: int, aspect: float) -> Tuple[int, int]:
    """
    Box whose rasterized shape area is closest to `target` pixels at the given aspect (h/w).
    At aspect 1 the sides may differ by one pixel; ties prefer the squarer, then the smaller box.
    """
    box_area = target / _FILL_RATIO[shape]
    guess_h = np.sqrt(box_area * aspect)
    candidates = []
    for h in {int(np.floor(guess_h)), int(np.ceil(guess_h)), int(round(guess_h))}:
        h = min(max(h, 1), height)
        if aspect == 1.0:
            w_options = {h - 1, h, h + 1}
        else:
            guess_w = box_area / h
            w_options = {int(np.floor(guess_w)), int(np.ceil(guess_w))}
        for w in w_options:
            w = min(max(w, 1), width)
            error = abs(shape_pixel_count(shape, h, w) - target)
            candidates.append((error, abs(h - w), h * w, h, w))
    *_, h, w = min(candidates)
    return h, w


def sample_patch_spec(
    rng: np.random.Generator,
    height: int,
    width: int,
    area_fraction: float,
    shape: PatchShape = "square",
    aspect: Optional[float] = None,
) -> PatchSpec:
    """Size the box so the shape covers ~area_fraction of the image, then place it uniformly."""
    if not 0.0 < area_fraction < 1.0:
        raise PatchSpecError(f"area_fraction must lie in (0, 1), got {area_fraction}")
    target = area_fraction * height * width
    if target < 1.0:
        raise PatchSpecError(f"area_fraction {area_fraction} covers less than one pixel of a {height}x{width} image")
    if shape == "square" or (aspect is None and shape != "rectangle"):
        aspect = 1.0
    elif aspect is None:
        aspect = float(np.exp(rng.uniform(np.log(0.5), np.log(2.0))))
    h, w = _best_box(shape, target, height, width, aspect)
    if shape_pixel_count(shape, h, w) < 1:
        raise PatchSpecError(f"{shape} patch of {h}x{w} has no pixels")
    x = int(rng.integers(0, height - h + 1))
    y = int(rng.integers(0, width - w + 1))
    return PatchSpec(x=x, y=y, h=h, w=w, shape=shape)


def rasterize_mask(spec: PatchSpec, height: int, width: int) -> np.ndarray:
    """[H,W] uint8 mask: 0 inside the patch shape, 1 elsewhere."""
    spec.validate(height, width)
    mask = np.ones((height, width), dtype=np.uint8)
    a, b = np.mgrid[0 : spec.h, 0 : spec.w]
    if spec.shape in ("rectangle", "square"):
        inside = np.ones((spec.h, spec.w), dtype=bool)
    elif spec.shape == "diamond":
        dr = np.abs(a + 0.5 - spec.h / 2) / (spec.h / 2)
        dc = np.abs(b + 0.5 - spec.w / 2) / (spec.w / 2)
        inside = dr + dc <= 1.0
    elif spec.shape == "octagon":
        cut = min(spec.h, spec.w) // 3
        ra, rb = spec.h - 1 - a, spec.w - 1 - b
        corners = (a + b < cut) | (a + rb < cut) | (ra + b < cut) | (ra + rb < cut)
        inside = ~corners
    else:
        raise PatchSpecError(f"unknown patch shape {spec.shape}")
    window = mask[spec.x : spec.x + spec.h, spec.y : spec.y + spec.w]
    window[inside] = 0
    return mask


def rasterize_masks(specs: Sequence[PatchSpec], height: int, width: int) -> np.ndarray:
    if not specs:
        return np.ones((0, height, width), dtype=np.uint8)
    return np.stack([rasterize_mask(spec, height, width) for spec in specs])
