"""Dataset ingestion, stratified splitting, preprocessing and batching.

Images flow through ``resize -> rescale -> augment (training only) ->
standardize (optional)`` and are emitted as float32 ``(B, S, S, 3)`` batches
with one-hot labels. Every random draw is keyed by explicit seeds, so the
same inputs always produce the same batch stream.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ConfigError, IngestionError, InputError, PartitionError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp"}
DEFAULT_SIDE = 363
RESCALE = 1 / 255
MANIFEST_FORMAT = "statecnn-split"


@dataclass
class Sample:
    label: int
    source_path: str = ""
    image: np.ndarray | None = None  # (H, W, 3) in [0, 255]; decoded lazily when None

    def load(self) -> np.ndarray:
        if self.image is not None:
            return self.image
        return decode_image(self.source_path)


@dataclass
class Dataset:
    classes: list[str]
    samples: list[Sample]
    root: str = ""
    skipped: int = 0

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise InputError(f"duplicate class names in {self.classes}")
        k = len(self.classes)
        for s in self.samples:
            if not 0 <= s.label < k:
                raise InputError(f"label {s.label} out of range for {k} classes ({s.source_path})")

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=len(self.classes)).tolist()

    def subset(self, indices) -> "Dataset":
        return Dataset(list(self.classes), [self.samples[i] for i in indices], self.root)


def decode_image(path) -> np.ndarray:
    """Decode an image file to float32 ``(H, W, 3)`` RGB in [0, 255]."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32)
    except (UnidentifiedImageError, OSError) as exc:
        raise InputError(f"cannot decode image {path}: {exc}") from None


def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except Exception:
        return False


def scan_directory(root) -> Dataset:
    """Read a ``root/<class_name>/<image>`` tree.

    Classes are sorted by name, files by path. Files that fail to decode are
    skipped and counted in ``Dataset.skipped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestionError(f"dataset root {root} has no class subdirectories")
    classes = [p.name for p in class_dirs]
    samples, skipped = [], 0
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.rglob("*") if p.is_file())
        found = 0
        for path in files:
            if path.suffix.lower() not in IMAGE_EXTENSIONS or not _decodable(path):
                skipped += 1
                continue
            samples.append(Sample(label, str(path)))
            found += 1
        if not found:
            raise IngestionError(f"class directory {cdir} has no decodable images")
    if skipped:
        log.warning("skipped %d undecodable or non-image files under %s", skipped, root)
    return Dataset(classes, samples, str(root), skipped)


def partition(d: Dataset, ratio: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified seeded split: each class is shuffled on its own and its
    first ``floor(ratio * n_c)`` samples go to training."""
    if not 0 < ratio < 1:
        raise PartitionError(f"ratio must lie in (0, 1), got {ratio}")
    labels = d.labels
    train_idx, val_idx = [], []
    for c, name in enumerate(d.classes):
        members = np.flatnonzero(labels == c)
        if len(members) < 2:
            raise PartitionError(f"class {name!r} has {len(members)} samples; at least 2 are needed")
        rng = np.random.default_rng([seed, c])
        members = members[rng.permutation(len(members))]
        cut = math.floor(ratio * len(members) + 1e-9)
        train_idx.extend(members[:cut].tolist())
        val_idx.extend(members[cut:].tolist())
    return d.subset(sorted(train_idx)), d.subset(sorted(val_idx))


def write_manifest(path, train: Dataset, val: Dataset, seed: int, ratio: float) -> None:
    root = Path(train.root)

    def rel(ds):
        return [Path(s.source_path).relative_to(root).as_posix() for s in ds.samples]

    doc = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "root": str(root.resolve()),
        "seed": seed,
        "ratio": ratio,
        "classes": train.classes,
        "splits": {"train": rel(train), "val": rel(val)},
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_manifest(path, root=None) -> tuple[Dataset, Dataset]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read split manifest {path}: {exc}") from None
    if doc.get("format") != MANIFEST_FORMAT:
        raise InputError(f"{path} is not a split manifest")
    root = Path(root or doc["root"])
    classes = doc["classes"]
    index = {name: k for k, name in enumerate(classes)}

    def build(paths):
        samples = []
        for rel in paths:
            cls = rel.split("/", 1)[0]
            if cls not in index:
                raise InputError(f"manifest entry {rel} names unknown class {cls!r}")
            samples.append(Sample(index[cls], str(root / rel)))
        return Dataset(list(classes), samples, str(root))

    return build(doc["splits"]["train"]), build(doc["splits"]["val"])


def resize(img: np.ndarray, side: int = DEFAULT_SIDE) -> np.ndarray:
    """Bilinear resize to ``side x side`` with half-pixel centres and edge clamping."""
    h, w = img.shape[:2]
    if h < 1 or w < 1:
        raise InputError(f"cannot resize empty image {img.shape}")
    if (h, w) == (side, side):
        return img.copy()

    def axis_weights(n_in):
        src = (np.arange(side) + 0.5) * (n_in / side) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(img.dtype)

    r0, r1, wr = axis_weights(h)
    c0, c1, wc = axis_weights(w)
    rows = img[r0] * (1 - wr)[:, None, None] + img[r1] * wr[:, None, None]
    out = rows[:, c0] * (1 - wc)[None, :, None] + rows[:, c1] * wc[None, :, None]
    # rounding may overshoot the convex hull by an ulp
    return np.clip(out, img.min(), img.max())


def rescale(img: np.ndarray, factor: float = RESCALE) -> np.ndarray:
    return img.astype(np.float32) * np.float32(factor)


def standardize(images: np.ndarray) -> np.ndarray:
    """Per-image zero mean / unit std. Constant images pass through unchanged."""
    single = images.ndim == 3
    x = images[None] if single else images
    out = np.empty_like(x)
    for i, img in enumerate(x):
        img64 = img.astype(np.float64)
        std = img64.std()
        if std == 0:
            log.warning("standardize: image %d has zero variance, left unchanged", i)
            out[i] = img
        else:
            out[i] = (img64 - img64.mean()) / std
    return out[0] if single else out


@dataclass(frozen=True)
class AugmentConfig:
    """Random affine augmentation, applied flip -> rotate -> zoom -> shift.

    ``zoom_range`` z draws a sampling scale in ``[1 - z, 1 + z]``: values
    below 1 magnify the image. Shifts are fractions of the image side.
    """

    rotation_max_deg: float = 20.0
    zoom_range: float = 0.1
    width_shift: float = 0.1
    height_shift: float = 0.1
    horizontal_flip: bool = True
    fill_mode: str = "nearest"
    seed: int = 0

    def __post_init__(self):
        if self.rotation_max_deg < 0:
            raise ConfigError("rotation_max_deg must be non-negative")
        if not 0 <= self.zoom_range < 1:
            raise ConfigError("zoom_range must lie in [0, 1)")
        if not (0 <= self.width_shift < 1 and 0 <= self.height_shift < 1):
            raise ConfigError("shifts must lie in [0, 1)")
        if self.fill_mode not in _FILL_MODES:
            raise ConfigError(f"fill_mode must be one of {sorted(_FILL_MODES)}")

    @classmethod
    def disabled(cls, **kw) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0, False, **kw)


_FILL_MODES = {"nearest": "nearest", "constant": "constant", "reflect": "reflect"}


@dataclass(frozen=True)
class AffineParams:
    flip: bool = False
    angle_deg: float = 0.0
    zoom: float = 1.0
    shift: tuple[float, float] = (0.0, 0.0)  # (rows, cols) in pixels


def draw_affine(cfg: AugmentConfig, rng: np.random.Generator, side: int) -> AffineParams:
    flip = bool(cfg.horizontal_flip and rng.random() < 0.5)
    angle = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg) if cfg.rotation_max_deg else 0.0
    zoom = rng.uniform(1 - cfg.zoom_range, 1 + cfg.zoom_range) if cfg.zoom_range else 1.0
    dy = rng.uniform(-cfg.height_shift, cfg.height_shift) * side if cfg.height_shift else 0.0
    dx = rng.uniform(-cfg.width_shift, cfg.width_shift) * side if cfg.width_shift else 0.0
    return AffineParams(flip, float(angle), float(zoom), (float(dy), float(dx)))


def _cos_sin(angle_deg: float) -> tuple[float, float]:
    # exact values on quarter turns so that symmetric images map onto themselves
    a = angle_deg % 360.0
    quarter = {0.0: (1.0, 0.0), 90.0: (0.0, 1.0), 180.0: (-1.0, 0.0), 270.0: (0.0, -1.0)}
    if a in quarter:
        return quarter[a]
    r = math.radians(a)
    return math.cos(r), math.sin(r)


def apply_affine(img: np.ndarray, params: AffineParams, fill_mode: str = "nearest") -> np.ndarray:
    """Warp an ``(H, W, C)`` image about its centre with bilinear sampling."""
    h, w = img.shape[:2]
    cos, sin = _cos_sin(params.angle_deg)
    flip = np.diag([1.0, -1.0 if params.flip else 1.0])
    # output -> input map: undo shift, then zoom, then rotation, then flip
    rot_inv = np.array([[cos, sin], [-sin, cos]])
    m = flip @ rot_inv * params.zoom
    shift = np.asarray(params.shift, dtype=np.float64)
    if np.array_equal(m, np.eye(2)) and not shift.any():
        return img.copy()
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - m @ (centre + shift)
    matrix = np.eye(3)
    matrix[:2, :2] = m
    out = ndimage.affine_transform(
        img, matrix, offset=np.append(offset, 0.0), order=1,
        mode=_FILL_MODES[fill_mode], cval=0.0,
    )
    return out.astype(img.dtype, copy=False)


def augment(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Randomly flip, rotate, zoom and shift a square image. Shape is preserved."""
    if img.shape[0] != img.shape[1]:
        raise InputError(f"augment expects a square image, got {img.shape}")
    return apply_affine(img, draw_affine(cfg, rng, img.shape[0]), cfg.fill_mode)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def one_hot(labels, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


@dataclass
class Batch:
    images: np.ndarray  # (B, S, S, 3) float32
    labels_onehot: np.ndarray  # (B, K)
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def labels(self) -> np.ndarray:
        return self.labels_onehot.argmax(axis=1)


@dataclass(frozen=True)
class Preprocess:
    side: int = DEFAULT_SIDE
    rescale: float = RESCALE
    standardize: bool = False

    def __call__(self, img: np.ndarray, augment_cfg: AugmentConfig | None = None,
                 rng: np.random.Generator | None = None) -> np.ndarray:
        x = rescale(resize(img, self.side), self.rescale)
        if augment_cfg is not None:
            x = augment(x, augment_cfg, rng)
            x = np.clip(x, 0.0, 1.0) if self.rescale == RESCALE else x
        if self.standardize:
            x = standardize(x)
        return x.astype(np.float32, copy=False)


def batches(d: Dataset, batch_size: int = 32, shuffle_seed: int | None = 0, epoch: int = 0,
            preprocess: Preprocess | None = None,
            augment_cfg: AugmentConfig | None = None) -> Iterator[Batch]:
    """Yield ``ceil(n / batch_size)`` batches; the last may be short.

    ``shuffle_seed=None`` keeps dataset order. Augmentation draws are keyed by
    ``(augment_cfg.seed, epoch, sample index)``.
    """
    if not len(d):
        raise InputError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    preprocess = preprocess or Preprocess()
    n = len(d)
    order = (np.arange(n) if shuffle_seed is None
             else np.random.default_rng([shuffle_seed, epoch]).permutation(n))
    k = len(d.classes)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        images = []
        for i in idx:
            rng = sample_rng(augment_cfg.seed, epoch, int(i)) if augment_cfg is not None else None
            images.append(preprocess(d.samples[i].load(), augment_cfg, rng))
        labels = [d.samples[i].label for i in idx]
        yield Batch(np.stack(images), one_hot(labels, k), idx)


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def load_dataset_arrays(d: Dataset, preprocess: Preprocess | None = None) -> tuple[np.ndarray, np.ndarray]:
    """All images preprocessed (no augmentation) plus integer labels."""
    preprocess = preprocess or Preprocess()
    images = np.stack([preprocess(s.load()) for s in d.samples])
    return images, d.labels


def in_memory(classes, images, labels) -> Dataset:
    """Wrap arrays of ``(H, W, 3)`` images in [0, 255] as a :class:`Dataset`."""
    samples = [Sample(int(y), f"<memory:{i}>", np.asarray(img, dtype=np.float32))
               for i, (img, y) in enumerate(zip(images, labels))]
    return Dataset(list(classes), samples)


def check_classes(d: Dataset, classes: list[str]) -> None:
    """Raise unless ``d`` has exactly ``classes``, in order."""
    if list(d.classes) != list(classes):
        raise InputError(f"dataset classes {d.classes} do not match expected {classes}")
