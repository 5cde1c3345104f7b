"""Synthetic fundus-like images with tree-shaped vessel annotations.

Used for desk-scale smoke runs and tests; written to disk in the same
directory layouts that :func:`drvnet.data.load_dataset` reads.
"""
from pathlib import Path

import numpy as np
from PIL import Image

from .data import DatasetName


def _stamp(mask, r, c, radius):
    h, w = mask.shape
    r0, r1 = max(0, int(r - radius)), min(h, int(r + radius) + 1)
    c0, c1 = max(0, int(c - radius)), min(w, int(c + radius) + 1)
    if r0 >= r1 or c0 >= c1:
        return
    rr, cc = np.ogrid[r0:r1, c0:c1]
    mask[r0:r1, c0:c1] |= (rr - r) ** 2 + (cc - c) ** 2 <= radius**2


def vessel_tree(shape, rng, n_roots=3, min_radius=0.6):
    """Binary mask of a few wandering, branching, tapering curves."""
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    scale = min(h, w)
    stack = []
    for _ in range(n_roots):
        r, c = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
        stack.append((r, c, rng.uniform(0, 2 * np.pi), rng.uniform(1.5, 2.5), 0))
    while stack:
        r, c, angle, radius, depth = stack.pop()
        length = int(scale * rng.uniform(0.3, 0.6))
        for step in range(length):
            _stamp(mask, r, c, radius)
            angle += rng.normal(0, 0.08)
            r += np.sin(angle)
            c += np.cos(angle)
            if not (0 <= r < h and 0 <= c < w):
                break
            if depth < 3 and step > 4 and rng.random() < 0.03:
                child = max(min_radius, radius * 0.7)
                stack.append((r, c, angle + rng.choice([-1, 1]) * rng.uniform(0.4, 1.0), child, depth + 1))
        radius = max(min_radius, radius * 0.9)
    return mask.astype(np.uint8)


def fundus_image(annotation, rng):
    """Reddish disc with smooth illumination, darker vessels, mild noise; float in [0, 1]."""
    h, w = annotation.shape
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = h / 2, w / 2
    radial = np.sqrt(((yy - cy) / (0.5 * h)) ** 2 + ((xx - cx) / (0.5 * w)) ** 2)
    disc = np.clip(1.2 - radial, 0, 1)
    base = np.stack([0.75 * disc + 0.1, 0.38 * disc + 0.05, 0.18 * disc + 0.02], axis=-1)
    vessel_tint = np.array([0.35, 0.18, 0.08])
    img = base - annotation[..., None] * vessel_tint * (0.6 + 0.4 * disc[..., None])
    img += rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def synthetic_pair(shape, seed):
    rng = np.random.default_rng(seed)
    annotation = vessel_tree(shape, rng)
    return fundus_image(annotation, rng), annotation


def _save_rgb(path, img):
    Image.fromarray((img * 255).round().astype(np.uint8)).save(path)


def _save_mask(path, ann):
    Image.fromarray(ann.astype(np.uint8) * 255).save(path)


def write_synthetic_dataset(root, dataset, n_images=None, shape=(48, 56), seed=0):
    """Write a small dataset in ``dataset``'s on-disk layout; returns the root.

    ``n_images`` defaults to the real dataset's count (40 / 28 / 20).
    """
    dataset = DatasetName.parse(dataset)
    root = Path(root)
    n_images = n_images or {DatasetName.DRIVE: 40, DatasetName.CHASEDB: 28, DatasetName.STARE: 20}[dataset]
    for i in range(n_images):
        img, ann = synthetic_pair(shape, seed * 1000 + i)
        if dataset is DatasetName.DRIVE:
            half = n_images // 2
            if i < half:
                subset, key = "training", f"{i + 21:02d}"
            else:
                subset, key = "test", f"{i - half + 1:02d}"
            (root / subset / "images").mkdir(parents=True, exist_ok=True)
            (root / subset / "1st_manual").mkdir(parents=True, exist_ok=True)
            _save_rgb(root / subset / "images" / f"{key}_{subset}.tif", img)
            _save_mask(root / subset / "1st_manual" / f"{key}_manual1.gif", ann)
        elif dataset is DatasetName.CHASEDB:
            root.mkdir(parents=True, exist_ok=True)
            stem = f"Image_{i // 2 + 1:02d}{'LR'[i % 2]}"
            _save_rgb(root / f"{stem}.jpg", img)
            _save_mask(root / f"{stem}_1stHO.png", ann)
        else:
            (root / "stare-images").mkdir(parents=True, exist_ok=True)
            (root / "labels-ah").mkdir(parents=True, exist_ok=True)
            _save_rgb(root / "stare-images" / f"im{i + 1:04d}.ppm", img)
            _save_mask(root / "labels-ah" / f"im{i + 1:04d}.ah.ppm", ann)
    return root
