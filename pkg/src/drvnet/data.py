"""
Dataset ingestion, zero padding, augmentation and split planning.

Arrays are kept in numpy, channels-last: images ``(h, w, 3)`` float32 in
``[0, 1]``, annotations ``(h, w)`` uint8 in ``{0, 1}``.

Directory conventions
---------------------
DRIVE::

    <root>/training/images/21_training.tif   <root>/training/1st_manual/21_manual1.gif
    <root>/test/images/01_test.tif           <root>/test/1st_manual/01_manual1.gif

CHASE DB (flat, as distributed)::

    <root>/Image_01L.jpg   <root>/Image_01L_1stHO.png

STARE::

    <root>/stare-images/im0001.ppm   <root>/labels-ah/im0001.ah.ppm
"""
import dataclasses
import json
import logging
import math
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .exceptions import ConfigError, DatasetError, InvalidInputError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".tif", ".tiff", ".png", ".jpg", ".jpeg", ".gif", ".ppm")


class DatasetName(str, Enum):
    DRIVE = "drive"
    CHASEDB = "chasedb"
    STARE = "stare"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown dataset {value!r}; choose from {[d.value for d in cls]}") from None


PADDED_SIZE = {DatasetName.DRIVE: 592, DatasetName.CHASEDB: 1008, DatasetName.STARE: 704}
BATCH_SIZE = {DatasetName.DRIVE: 2, DatasetName.CHASEDB: 1, DatasetName.STARE: 2}
STARE_FOLDS = 4
CHASEDB_TEST = 8
VAL_FRACTION = 0.1


@dataclass
class RetinalSample:
    image: np.ndarray
    annotation: np.ndarray
    identifier: str
    dataset: DatasetName
    original_size: tuple
    pad_offsets: tuple = (0, 0)

    @property
    def padded_size(self):
        return tuple(self.image.shape[:2])

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


# -- loading -----------------------------------------------------------------


def read_image(path):
    """Read a raster as float32 ``(h, w, 3)`` scaled by the format's maximum."""
    try:
        with Image.open(path) as im:
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
                arr = np.repeat(arr[..., None], 3, axis=-1)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    return arr.astype(np.float32)


def read_annotation(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot decode annotation {path}: {exc}") from exc
    return (arr > 0).astype(np.uint8)


def _rasters(directory):
    if not directory.is_dir():
        raise DatasetError(f"missing directory {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _find(directory, stem_prefix, what):
    hits = [p for p in _rasters(directory) if p.stem == stem_prefix or p.name.startswith(stem_prefix + ".")]
    if not hits:
        raise DatasetError(f"no {what} matching '{stem_prefix}' in {directory}")
    return hits[0]


def _make_sample(image_path, ann_path, identifier, dataset):
    image = read_image(image_path)
    annotation = read_annotation(ann_path)
    if image.shape[:2] != annotation.shape:
        raise DatasetError(f"{image_path} is {image.shape[:2]} but {ann_path} is {annotation.shape}")
    return RetinalSample(image, annotation, identifier, dataset, tuple(annotation.shape))


def _load_drive(root):
    samples = []
    for subset in ("training", "test"):
        for img in _rasters(root / subset / "images"):
            key = img.stem.split("_")[0]
            ann = _find(root / subset / "1st_manual", f"{key}_manual1", f"annotation for {img.name}")
            samples.append(_make_sample(img, ann, f"{subset}/{key}", DatasetName.DRIVE))
    return samples


def _load_chasedb(root):
    samples = []
    images = [p for p in _rasters(root) if not re.search(r"_(1st|2nd)HO$", p.stem)]
    for img in images:
        ann = _find(root, f"{img.stem}_1stHO", f"annotation for {img.name}")
        samples.append(_make_sample(img, ann, img.stem, DatasetName.CHASEDB))
    return samples


def _load_stare(root):
    samples = []
    for img in _rasters(root / "stare-images"):
        ann = _find(root / "labels-ah", f"{img.stem}.ah", f"annotation for {img.name}")
        samples.append(_make_sample(img, ann, img.stem, DatasetName.STARE))
    return samples


_LOADERS = {
    DatasetName.DRIVE: _load_drive,
    DatasetName.CHASEDB: _load_chasedb,
    DatasetName.STARE: _load_stare,
}


def load_dataset(root, dataset):
    """Load every image/annotation pair under ``root`` in identifier order."""
    dataset = DatasetName.parse(dataset)
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    samples = _LOADERS[dataset](root)
    if not samples:
        raise DatasetError(f"no images found under {root} for {dataset.value}")
    return samples


# -- padding -----------------------------------------------------------------


def pad_offsets(original_size, padded_size):
    (h, w), (H, W) = original_size, padded_size
    if H < h or W < w:
        raise InvalidInputError(f"cannot pad {h}x{w} down to {H}x{W}")
    return ((H - h) // 2, (W - w) // 2)


def zero_pad(sample, H, W=None):
    """Centre the sample on an ``H x W`` zero canvas (floor/ceil margin split)."""
    W = H if W is None else W
    if H % 8 or W % 8:
        raise InvalidInputError(f"padded size {H}x{W} must be divisible by 8")
    h, w = sample.annotation.shape
    top, left = pad_offsets((h, w), (H, W))
    image = np.zeros((H, W) + sample.image.shape[2:], dtype=sample.image.dtype)
    image[top : top + h, left : left + w] = sample.image
    annotation = np.zeros((H, W), dtype=sample.annotation.dtype)
    annotation[top : top + h, left : left + w] = sample.annotation
    return sample.replace(image=image, annotation=annotation, original_size=(h, w), pad_offsets=(top, left))


def crop_to_original(arr, original_size, offsets):
    """Undo :func:`zero_pad` on any array whose first two axes are spatial."""
    (h, w), (top, left) = original_size, offsets
    if top < 0 or left < 0 or top + h > arr.shape[0] or left + w > arr.shape[1]:
        raise InvalidInputError(
            f"offsets {offsets} with size {original_size} do not fit an array of shape {arr.shape[:2]}"
        )
    return arr[top : top + h, left : left + w]


def unpad(sample):
    return sample.replace(
        image=crop_to_original(sample.image, sample.original_size, sample.pad_offsets),
        annotation=crop_to_original(sample.annotation, sample.original_size, sample.pad_offsets),
        pad_offsets=(0, 0),
    )


def padded_size_for(dataset, override=None):
    return override if override else PADDED_SIZE[DatasetName.parse(dataset)]


# -- augmentation ------------------------------------------------------------


class Transform(NamedTuple):
    quarter_turns: int = 0
    hflip: bool = False
    vflip: bool = False
    transpose: bool = False
    angle: float = 0.0  # only used when arbitrary rotations are enabled

    @property
    def is_identity(self):
        return not (self.quarter_turns % 4 or self.hflip or self.vflip or self.transpose or self.angle)


def draw_transform(rng, arbitrary_rotation=False):
    turns = int(rng.integers(4))
    hflip, vflip, transpose = (bool(b) for b in rng.random(3) < 0.5)
    angle = float(rng.uniform(0.0, 360.0)) if arbitrary_rotation else 0.0
    return Transform(0 if arbitrary_rotation else turns, hflip, vflip, transpose, angle)


def apply_transform(arr, t, order=0):
    """Apply ``t`` to the two leading axes of ``arr``."""
    if t.angle:
        from scipy import ndimage

        arr = ndimage.rotate(arr, t.angle, axes=(1, 0), reshape=False, order=order, mode="constant")
    out = np.rot90(arr, t.quarter_turns, axes=(0, 1))
    if t.hflip:
        out = out[:, ::-1]
    if t.vflip:
        out = out[::-1]
    if t.transpose:
        out = np.swapaxes(out, 0, 1)
    return np.ascontiguousarray(out)


def augment(sample, rng, arbitrary_rotation=False, transform=None):
    """Randomly rotate and flip image and annotation with the same transform."""
    t = transform if transform is not None else draw_transform(rng, arbitrary_rotation)
    if t.is_identity:
        return sample
    image = apply_transform(sample.image, t, order=1)
    annotation = apply_transform(sample.annotation, t, order=0)
    return sample.replace(image=image, annotation=annotation)


def random_patch(sample, size, rng):
    """Crop a random ``size x size`` window (for desk-scale training)."""
    H, W = sample.annotation.shape
    if size > H or size > W:
        raise InvalidInputError(f"patch {size} larger than image {H}x{W}")
    top = int(rng.integers(H - size + 1))
    left = int(rng.integers(W - size + 1))
    return sample.replace(
        image=sample.image[top : top + size, left : left + size],
        annotation=sample.annotation[top : top + size, left : left + size],
    )


# -- splits ------------------------------------------------------------------


@dataclass
class SplitPlan:
    dataset: DatasetName
    seed: int
    train_ids: list
    val_ids: list
    test_ids: list
    folds: list = None
    fold: int = None

    def __post_init__(self):
        self.dataset = DatasetName.parse(self.dataset)
        sets = [set(self.train_ids), set(self.val_ids), set(self.test_ids)]
        if sum(map(len, sets)) != len(set().union(*sets)):
            raise InvalidInputError("train/val/test id sets overlap")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["dataset"] = self.dataset.value
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _carve_validation(pool, rng):
    pool = list(pool)
    n_val = max(1, round(VAL_FRACTION * len(pool))) if len(pool) > 1 else 0
    order = rng.permutation(len(pool))
    val = sorted(pool[i] for i in order[:n_val])
    train = sorted(pool[i] for i in order[n_val:])
    return train, val


def make_split(ids, dataset, seed, fold=0):
    """Plan train/val/test ids following the per-dataset protocol.

    DRIVE uses the official training/test folders, CHASE DB holds out the last
    8 images in filename order, STARE is cut into 4 seeded folds and ``fold``
    selects the test fold. Validation is a seeded 10% carve-out of the
    remaining training pool.
    """
    dataset = DatasetName.parse(dataset)
    ids = sorted(ids)
    rng = np.random.default_rng(seed)
    folds = None
    if dataset is DatasetName.DRIVE:
        pool = [i for i in ids if i.startswith("training/")]
        test = [i for i in ids if i.startswith("test/")]
        fold = None
    elif dataset is DatasetName.CHASEDB:
        n_test = CHASEDB_TEST if len(ids) == 28 else max(1, round(len(ids) * CHASEDB_TEST / 28))
        if len(ids) != 28:
            log.warning("CHASE DB has %d images (expected 28); holding out the last %d", len(ids), n_test)
        pool, test = ids[:-n_test], ids[-n_test:]
        fold = None
    else:
        if not 0 <= fold < STARE_FOLDS:
            raise ConfigError(f"fold must be in [0, {STARE_FOLDS}), got {fold}")
        if len(ids) < STARE_FOLDS:
            raise InvalidInputError(f"need at least {STARE_FOLDS} STARE images, got {len(ids)}")
        order = rng.permutation(len(ids))
        folds = [sorted(ids[i] for i in chunk) for chunk in np.array_split(order, STARE_FOLDS)]
        test = folds[fold]
        pool = [i for i in ids if i not in set(test)]
    train, val = _carve_validation(pool, rng)
    return SplitPlan(dataset, seed, train, val, sorted(test), folds, fold)


def select(samples, ids):
    by_id = {s.identifier: s for s in samples}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise DatasetError(f"split refers to unknown ids {missing[:5]}")
    return [by_id[i] for i in ids]


def to_tensors(samples):
    """Stack samples into ``(B, 3, H, W)`` float32 images and ``(B, 1, H, W)`` targets."""
    import torch

    images = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2)
    targets = np.stack([s.annotation for s in samples])[:, None].astype(np.float32)
    return torch.from_numpy(np.ascontiguousarray(images)), torch.from_numpy(targets)


def fold_indices(dataset):
    return list(range(STARE_FOLDS)) if DatasetName.parse(dataset) is DatasetName.STARE else [None]


def ceil_to(n, k=8):
    return int(math.ceil(n / k) * k)

