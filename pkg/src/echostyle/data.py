"""Datasets: directory ingestion, the synthetic desk-scale corpus, and the
geometric baseline augmenters (rotation, scaling, flipping)."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .image import check_image, read_image, write_pgm

__all__ = [
    "DatasetItem",
    "Dataset",
    "IngestError",
    "ingest",
    "load_items",
    "synthetic_items",
    "gen_synthetic",
    "geometric_augment",
    "geometric_variants",
]

LABELS = ("benign", "malignant")


@dataclass(frozen=True)
class DatasetItem:
    path: str
    label: str


@dataclass
class Dataset:
    root: str
    items: list
    provenance: str = "original"

    def counts(self) -> dict:
        out = {label: 0 for label in LABELS}
        for it in self.items:
            out[it.label] += 1
        return out


class IngestError(RuntimeError):
    def __init__(self, bad):
        super().__init__(
            "unreadable or invalid image files:\n  " + "\n  ".join(
                f"{p}: {err}" for p, err in bad)
        )
        self.bad = bad


def ingest(root, skip_bad: bool = False) -> Dataset:
    """Load a two-class directory layout (root/benign, root/malignant) with
    deterministic lexicographic ordering. Invalid files abort the run with a
    list of offenders unless skip_bad is set."""
    root = str(root)
    for label in LABELS:
        if not os.path.isdir(os.path.join(root, label)):
            raise FileNotFoundError(f"{root!r} has no {label}/ subdirectory")
    items, bad = [], []
    for label in LABELS:
        folder = os.path.join(root, label)
        for name in sorted(os.listdir(folder)):
            path = os.path.join(folder, name)
            if not os.path.isfile(path):
                continue
            try:
                check_image(read_image(path), name=path)
            except Exception as e:
                bad.append((path, str(e)))
                continue
            items.append(DatasetItem(path, label))
    if bad and not skip_bad:
        raise IngestError(bad)
    return Dataset(root, items)


def load_items(dataset: Dataset) -> list:
    """Materialize (image, label) pairs from a dataset."""
    return [(read_image(it.path), it.label) for it in dataset.items]


# ------------------------------------------------------------- synthetic

def _speckle(rng: np.random.Generator, img: np.ndarray, sigma: float) -> np.ndarray:
    return img * (1.0 + sigma * rng.standard_normal(img.shape))


def _mass_image(rng: np.random.Generator, size: int, malignant: bool) -> np.ndarray:
    """One textured-mass image: a lesion on a darker background with depth
    shading, multiplicative speckle and a per-image contrast style. Benign
    masses are bright, smooth-boundary ellipses; malignant ones are strongly
    lobulated with a dark core and a bright irregular rim."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 + rng.uniform(-size / 12, size / 12)
    cx = size / 2 + rng.uniform(-size / 12, size / 12)
    ry = rng.uniform(0.26, 0.36) * size
    rx = rng.uniform(0.26, 0.36) * size
    dy, dx = (ys - cy) / ry, (xs - cx) / rx
    radius = np.sqrt(dy * dy + dx * dx)
    theta = np.arctan2(dy, dx)

    if malignant:
        boundary = np.ones_like(theta)
        for k in (3, 4):
            boundary += rng.uniform(0.18, 0.30) * np.sin(k * theta + rng.uniform(0, 2 * np.pi))
        boundary = np.maximum(boundary, 0.35)
    else:
        boundary = 1.0 + 0.02 * np.sin(2 * theta + rng.uniform(0, 2 * np.pi))

    background = rng.uniform(0.22, 0.30)
    depth_gain = rng.uniform(-0.12, 0.12)
    img = background * (1.0 + depth_gain * (ys / size - 0.5))
    edge = np.clip((boundary - radius) / (2.5 / size), 0.0, 1.0)  # ~1 px rim
    if malignant:
        # bright spiculated rim around a markedly dark core
        rim = rng.uniform(0.78, 0.9)
        img = img * (1 - edge) + rim * edge
        core = np.clip((0.55 * boundary - radius) / (2.5 / size), 0.0, 1.0)
        img = img * (1 - core) + rng.uniform(0.08, 0.16) * core
    else:
        lesion = rng.uniform(0.55, 0.68)
        img = img * (1 - edge) + lesion * edge

    img = _speckle(rng, img, rng.uniform(0.08, 0.18))
    img = np.clip(img, 0.02, 0.98) ** rng.uniform(0.85, 1.2)
    return np.clip(img, 0.02, 0.98)


def synthetic_items(n_per_class: int, size: int = 16, seed: int = 0) -> list:
    """In-memory synthetic corpus: n benign + n malignant (image, label)
    pairs. Fixed seed gives the bit-identical corpus."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    rng = np.random.default_rng(seed)
    items = []
    for label, malignant in (("benign", False), ("malignant", True)):
        for _ in range(n_per_class):
            items.append((_mass_image(rng, size, malignant), label))
    return items


def gen_synthetic(n_per_class: int, size: int, seed: int, out_dir) -> Dataset:
    """Write the synthetic corpus as PGMs under out_dir/benign and
    out_dir/malignant and return the dataset."""
    items = synthetic_items(n_per_class, size, seed)
    ds_items = []
    counters = {label: 0 for label in LABELS}
    for label in LABELS:
        os.makedirs(os.path.join(out_dir, label), exist_ok=True)
    for img, label in items:
        name = f"{label}_{counters[label]:04d}.pgm"
        counters[label] += 1
        path = os.path.join(out_dir, label, name)
        write_pgm(path, img)
        ds_items.append(DatasetItem(path, label))
    return Dataset(str(out_dir), ds_items, provenance="original")


# ------------------------------------------------------------- geometric

def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Clamped bilinear sampling at fractional coordinates."""
    h, w = img.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def geometric_augment(image: np.ndarray, op: str, angle: float = 0.0,
                      scale: float = 1.0, axis: str = "horizontal") -> np.ndarray:
    """Baseline augmenters: rotate by `angle` degrees (counterclockwise,
    about the center, bilinear), scale about the center, or mirror flip.
    Output has the input's size; out-of-range samples clamp to the edge."""
    img = np.asarray(image, dtype=np.float64)
    if op == "flip":
        if axis == "horizontal":
            return img[:, ::-1].copy()
        if axis == "vertical":
            return img[::-1, :].copy()
        raise ValueError(f"flip axis must be horizontal or vertical, got {axis!r}")
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yo, xo = np.mgrid[0:h, 0:w].astype(np.float64)
    if op == "rotate":
        t = np.deg2rad(angle)
        xs = cx + np.cos(t) * (xo - cx) - np.sin(t) * (yo - cy)
        ys = cy + np.sin(t) * (xo - cx) + np.cos(t) * (yo - cy)
    elif op == "scale":
        if scale <= 0:
            raise ValueError(f"scale must be > 0, got {scale}")
        xs = cx + (xo - cx) / scale
        ys = cy + (yo - cy) / scale
    else:
        raise ValueError(f"unknown op {op!r}; use rotate, scale or flip")
    return np.clip(_bilinear(img, ys, xs), 0.0, 1.0)


def geometric_variants(image: np.ndarray) -> dict:
    """The default baseline expansion: five variants per image (three
    rotations, one scale, one flip)."""
    return {
        "rot090": geometric_augment(image, "rotate", angle=90),
        "rot180": geometric_augment(image, "rotate", angle=180),
        "rot270": geometric_augment(image, "rotate", angle=270),
        "scale125": geometric_augment(image, "scale", scale=1.25),
        "flip_h": geometric_augment(image, "flip", axis="horizontal"),
    }
