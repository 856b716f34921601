"""Procedural shapes dataset, augmentation, imbalanced sampling and IDX loading.

Images live on a 36x36 canvas with values in [0, 1]. Training crops a
random 32x32 window and flips it horizontally with probability 0.5;
evaluation takes the center crop.
"""
import hashlib
import math
import struct
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from qdistill.exceptions import ConfigurationError, DataFormatError

logger = getLogger(__name__)

CANVAS = 36
CROP = 32
MAX_OFFSET = CANVAS - CROP
CENTER_OFFSET = MAX_OFFSET // 2

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class DatasetSplit:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ConfigurationError(
                f"split needs (N, C, H, W) images and N labels, got {self.images.shape} and {self.labels.shape}"
            )
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ConfigurationError("split images must be normalized to [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigurationError(f"split labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# -- rendering ---------------------------------------------------------------

_YY, _XX = np.mgrid[0:CANVAS, 0:CANVAS].astype(np.float64) + 0.5


def _rotate(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return points @ np.array([[c, s], [-s, c]])


def _inside_polygon(vertices: np.ndarray) -> np.ndarray:
    """Mask of pixel centers inside a convex polygon (vertices in x, y order)."""
    inside = np.ones((CANVAS, CANVAS), dtype=bool)
    signs = []
    for (x0, y0), (x1, y1) in zip(vertices, np.roll(vertices, -1, axis=0)):
        signs.append((x1 - x0) * (_YY - y0) - (y1 - y0) * (_XX - x0))
    signs = np.stack(signs)
    inside &= np.all(signs >= 0, axis=0) | np.all(signs <= 0, axis=0)
    return inside


def _regular_polygon(sides: int, cx: float, cy: float, radius: float, angle: float) -> np.ndarray:
    theta = angle + np.arange(sides) * 2 * math.pi / sides
    return np.stack([cx + radius * np.cos(theta), cy + radius * np.sin(theta)], axis=1)


def _segment_distance(x0: float, y0: float, x1: float, y1: float) -> np.ndarray:
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((_XX - x0) * dx + (_YY - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(_XX - (x0 + t * dx), _YY - (y0 + t * dy))


def _line(cx, cy, length, angle, thickness) -> np.ndarray:
    hx, hy = 0.5 * length * math.cos(angle), 0.5 * length * math.sin(angle)
    return _segment_distance(cx - hx, cy - hy, cx + hx, cy + hy) <= thickness / 2


def _hollow(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    return outer & ~inner


def _render(shape_class: int, rng: np.random.Generator) -> np.ndarray:
    cx, cy = CANVAS / 2 + rng.uniform(-3, 3, size=2)
    r = rng.uniform(6.0, 9.5)
    angle = rng.uniform(-0.25, 0.25)
    thick = rng.uniform(1.5, 2.5)
    dist = np.hypot(_XX - cx, _YY - cy)
    if shape_class == 0:  # filled disc
        mask = dist <= r
    elif shape_class == 1:  # ring
        mask = (dist <= r) & (dist >= r - thick)
    elif shape_class == 2:  # filled square
        mask = _inside_polygon(_regular_polygon(4, cx, cy, r, math.pi / 4 + angle))
    elif shape_class == 3:  # hollow square
        mask = _hollow(_inside_polygon(_regular_polygon(4, cx, cy, r, math.pi / 4 + angle)),
                       _inside_polygon(_regular_polygon(4, cx, cy, r - 1.6 * thick, math.pi / 4 + angle)))
    elif shape_class == 4:  # filled triangle
        mask = _inside_polygon(_regular_polygon(3, cx, cy, r, -math.pi / 2 + angle))
    elif shape_class == 5:  # hollow triangle
        mask = _hollow(_inside_polygon(_regular_polygon(3, cx, cy, r, -math.pi / 2 + angle)),
                       _inside_polygon(_regular_polygon(3, cx, cy, r - 2.2 * thick, -math.pi / 2 + angle)))
    elif shape_class == 6:  # horizontal bar
        mask = _line(cx, cy, 2 * r, angle, thick + 1)
    elif shape_class == 7:  # vertical bar
        mask = _line(cx, cy, 2 * r, math.pi / 2 + angle, thick + 1)
    elif shape_class == 8:  # plus
        mask = _line(cx, cy, 2 * r, angle, thick) | _line(cx, cy, 2 * r, math.pi / 2 + angle, thick)
    elif shape_class == 9:  # diagonal cross
        mask = (_line(cx, cy, 2 * r, math.pi / 4 + angle, thick)
                | _line(cx, cy, 2 * r, -math.pi / 4 + angle, thick))
    elif shape_class == 10:  # upper half arc
        mask = (dist <= r) & (dist >= r - thick) & (_YY <= cy)
    elif shape_class == 11:  # filled diamond (narrow rhombus)
        pts = np.array([[0, -r], [0.55 * r, 0], [0, r], [-0.55 * r, 0]])
        mask = _inside_polygon(_rotate(pts, angle) + [cx, cy])
    elif shape_class == 12:  # two dots
        off = 0.55 * r
        mask = (np.hypot(_XX - (cx - off), _YY - cy) <= 0.35 * r) | (np.hypot(_XX - (cx + off), _YY - cy) <= 0.35 * r)
    elif shape_class == 13:  # bullseye
        mask = ((dist <= r) & (dist >= r - thick)) | (dist <= 0.3 * r)
    elif shape_class == 14:  # filled hexagon
        mask = _inside_polygon(_regular_polygon(6, cx, cy, r, angle))
    elif shape_class == 15:  # lower half arc
        mask = (dist <= r) & (dist >= r - thick) & (_YY >= cy)
    else:
        raise ConfigurationError(f"unknown shape class {shape_class}")
    intensity = rng.uniform(0.6, 1.0)
    background = rng.uniform(0.0, 0.15)
    image = np.where(mask, intensity, background) + rng.normal(0.0, 0.06, size=mask.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


NUM_SHAPE_CLASSES = 16


def default_class_counts(num_classes: int, max_count: int = 400, ratio: float = 0.7, floor: int = 10) -> List[int]:
    """Long-tailed per-class training counts: geometric decay with a floor."""
    return [max(floor, int(round(max_count * ratio ** c))) for c in range(num_classes)]


def _eval_count(train_count: int, eval_fraction: float) -> int:
    return max(2, int(round(train_count * eval_fraction)))


def generate_shapes_dataset(
    num_classes: int,
    samples_per_class: Optional[Sequence[int]] = None,
    seed: int = 0,
    eval_fraction: float = 0.25,
) -> Tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    """Render train/val/test splits of the procedural shapes dataset.

    samples_per_class gives the exact training count of every class; the
    validation and test splits take eval_fraction of it (at least 2).
    No image appears twice across the three splits.
    """
    if not 4 <= num_classes <= NUM_SHAPE_CLASSES:
        raise ConfigurationError(f"num_classes must lie in [4, {NUM_SHAPE_CLASSES}], got {num_classes}")
    counts = list(samples_per_class) if samples_per_class is not None else default_class_counts(num_classes)
    if len(counts) != num_classes:
        raise ConfigurationError(f"{len(counts)} class counts given for {num_classes} classes")
    if any(int(c) < 10 for c in counts):
        raise ConfigurationError(f"every class needs at least 10 training samples, got {counts}")
    if not 0 < eval_fraction <= 1:
        raise ConfigurationError(f"eval_fraction must lie in (0, 1], got {eval_fraction}")

    rng = np.random.default_rng(seed)
    seen = set()

    def draw(shape_class: int) -> np.ndarray:
        while True:
            image = _render(shape_class, rng)
            digest = hashlib.sha1(image.tobytes()).digest()
            if digest not in seen:
                seen.add(digest)
                return image

    splits = []
    for split_counts in (counts, [_eval_count(c, eval_fraction) for c in counts],
                         [_eval_count(c, eval_fraction) for c in counts]):
        images, labels = [], []
        for shape_class, count in enumerate(split_counts):
            for _ in range(int(count)):
                images.append(draw(shape_class))
                labels.append(shape_class)
        splits.append(DatasetSplit(np.stack(images)[:, None], np.array(labels), num_classes))
    train, val, test = splits
    logger.info(f"generated shapes dataset: train={len(train)} val={len(val)} test={len(test)} seed={seed}")
    return train, val, test


# -- augmentation ----------------------------------------------------------------


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def center_crop(image: np.ndarray) -> np.ndarray:
    o = CENTER_OFFSET
    return image[..., o:o + CROP, o:o + CROP].copy()


def augment(image: np.ndarray, rng: Optional[np.random.Generator] = None, train: bool = True) -> np.ndarray:
    """Random 32x32 crop plus a coin-flip horizontal flip; center crop when not training.

    Without an rng the draws come from a freshly seeded generator.
    """
    if image.shape[-2:] != (CANVAS, CANVAS):
        raise ConfigurationError(f"augment expects a {CANVAS}x{CANVAS} image, got {image.shape}")
    if not train:
        return center_crop(image)
    rng = rng if rng is not None else np.random.default_rng()
    top, left = rng.integers(0, MAX_OFFSET + 1, size=2)
    crop = image[..., top:top + CROP, left:left + CROP]
    if rng.random() < 0.5:
        return hflip(crop)
    return crop.copy()


def augment_batch(images: np.ndarray, rng: Optional[np.random.Generator] = None, train: bool = True) -> np.ndarray:
    if not train:
        return center_crop(images)
    rng = rng if rng is not None else np.random.default_rng()
    return np.stack([augment(image, rng, train=True) for image in images])


def imbalanced_sampler(
    class_counts: Sequence[int],
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
    labels: Optional[np.ndarray] = None,
    num_samples: Optional[int] = None,
) -> Iterator[np.ndarray]:
    """Yield batches of indices drawn with probability 1 / count(class(i)).

    Samples are taken to be stored class by class in the order of
    class_counts unless labels gives the class of every sample. Every
    class is drawn equally often in expectation. One pass yields
    num_samples draws (default: the dataset size).
    """
    counts = np.asarray(class_counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0:
        raise ConfigurationError("cannot sample without class counts")
    if np.any(counts < 1):
        raise ConfigurationError(f"every class needs at least one sample, got counts {counts.tolist()}")
    if labels is None:
        labels = np.repeat(np.arange(counts.size), counts)
    else:
        labels = np.asarray(labels, dtype=np.int64)
        if not np.array_equal(np.bincount(labels, minlength=counts.size), counts):
            raise ConfigurationError("labels do not match the class counts")
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be at least 1, got {batch_size}")
    rng = rng if rng is not None else np.random.default_rng()
    weights = 1.0 / counts[labels]
    weights /= weights.sum()
    remaining = len(labels) if num_samples is None else int(num_samples)
    while remaining > 0:
        size = min(batch_size, remaining)
        yield rng.choice(len(labels), size=size, replace=True, p=weights)
        remaining -= size


def sequential_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# -- IDX files ---------------------------------------------------------------------


def _read_idx(path: Union[str, Path], magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: file too short for an IDX header", offset=0)
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataFormatError(f"{path}: expected IDX magic 0x{magic:08x}, found 0x{found:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX dimensions", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header < expected:
        raise DataFormatError(f"{path}: expected {expected} data bytes, found {len(raw) - header}", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header).reshape(dims)


def load_idx_split(images_path: Union[str, Path], labels_path: Union[str, Path], num_classes: int) -> DatasetSplit:
    """Load an IDX image/label pair; images are centered on the 36x36 canvas and scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    n, h, w = images.shape
    if h > CANVAS or w > CANVAS:
        raise DataFormatError(f"IDX images of {h}x{w} exceed the {CANVAS}x{CANVAS} canvas")
    canvas = np.zeros((n, 1, CANVAS, CANVAS), dtype=np.float32)
    top, left = (CANVAS - h) // 2, (CANVAS - w) // 2
    canvas[:, 0, top:top + h, left:left + w] = images.astype(np.float32) / 255.0
    return DatasetSplit(canvas, labels.astype(np.int64), num_classes)


def write_idx(path: Union[str, Path], array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


# -- configuration -------------------------------------------------------------------


@dataclass
class DataConfig:
    """Where the splits come from: the procedural generator, or IDX files in idx_dir.

    idx_dir must hold {train,val,test}-images.idx and {train,val,test}-labels.idx.
    """

    num_classes: int = 8
    samples_per_class: Optional[List[int]] = None
    eval_fraction: float = 0.25
    seed: int = 0
    idx_dir: Optional[str] = None

    def __post_init__(self):
        if self.samples_per_class is not None:
            self.samples_per_class = [int(c) for c in self.samples_per_class]


def load_dataset(cfg: DataConfig) -> Tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    """(train, val, test) splits for a DataConfig."""
    if cfg.idx_dir is None:
        return generate_shapes_dataset(cfg.num_classes, cfg.samples_per_class, cfg.seed, cfg.eval_fraction)
    root = Path(cfg.idx_dir)
    splits = tuple(
        load_idx_split(root / f"{name}-images.idx", root / f"{name}-labels.idx", cfg.num_classes)
        for name in ("train", "val", "test")
    )
    logger.info(f"loaded IDX dataset from {root}: " + " ".join(f"{n}={len(s)}" for n, s in
                                                            zip(("train", "val", "test"), splits)))
    return splits
