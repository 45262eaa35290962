"""Synthetic stand-in dataset: ten procedural texture/shape families.

The real capsule-endoscopy corpus is access-restricted, so tests and
demos run on generated frames instead.  Every class pairs a distinct
base color with a distinct pattern, which makes the classes separable
in mean-color space by construction — a 1-nearest-centroid classifier
on mean RGB is the generator's own correctness oracle.

Same seed, same bytes: per-image RNG streams are derived from
(seed, class index, image index), and PNG encoding adds no timestamps.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import DEFAULT_CLASS_NAMES
from .errors import DataError

_SYNTH_STREAM = 0x5D7

# one well-separated RGB anchor per class, in class order
BASE_COLORS = (
    (190, 60, 50),     # mottled red
    (120, 15, 25),     # dark saturated red
    (210, 140, 60),    # tan/orange
    (235, 90, 110),    # pink
    (90, 90, 200),     # blue-grey foreign object
    (240, 230, 180),   # pale yellow
    (250, 190, 150),   # healthy salmon
    (170, 80, 160),    # purple bump
    (230, 220, 90),    # yellow crater
    (140, 200, 120),   # pale green strands
)


def _coords(size: int):
    return np.meshgrid(np.arange(size), np.arange(size), indexing="ij")


def _pattern_mask(family: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean foreground mask for one of the ten pattern families."""
    yy, xx = _coords(size)
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    if family == 0:      # filled disk
        r = rng.uniform(0.15, 0.3) * size
        return (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
    if family == 1:      # horizontal stripes
        period = int(rng.integers(6, 12))
        return (yy // period) % 2 == 0
    if family == 2:      # vertical stripes
        period = int(rng.integers(6, 12))
        return (xx // period) % 2 == 0
    if family == 3:      # diagonal bands
        period = int(rng.integers(8, 16))
        return ((yy + xx) // period) % 2 == 0
    if family == 4:      # concentric rings
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        period = rng.uniform(5, 9)
        return (r / period).astype(int) % 2 == 0
    if family == 5:      # checkerboard
        period = int(rng.integers(8, 14))
        return ((yy // period) + (xx // period)) % 2 == 0
    if family == 6:      # scattered blobs
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(3, 7))):
            by, bx = rng.uniform(0.1, 0.9, size=2) * size
            br = rng.uniform(0.05, 0.12) * size
            mask |= (yy - by) ** 2 + (xx - bx) ** 2 < br ** 2
        return mask
    if family == 7:      # axis-aligned square
        half = rng.uniform(0.12, 0.24) * size
        return (np.abs(yy - cy) < half) & (np.abs(xx - cx) < half)
    if family == 8:      # cross
        width = rng.uniform(0.06, 0.12) * size
        return (np.abs(yy - cy) < width) | (np.abs(xx - cx) < width)
    if family == 9:      # coarse binary noise
        coarse = rng.random((size // 8 + 1, size // 8 + 1)) < 0.5
        return np.kron(coarse, np.ones((8, 8), dtype=bool))[:size, :size]
    raise ValueError(f"unknown pattern family {family}")


def render_frame(class_index: int, rng: np.random.Generator,
                 size: int = 64) -> np.ndarray:
    """One H x W x 3 uint8 frame of the given class family."""
    base = np.array(BASE_COLORS[class_index % len(BASE_COLORS)], dtype=np.float64)
    jitter = rng.normal(0.0, 6.0, size=3)
    background = base * 0.7 + jitter
    foreground = np.clip(base * 1.25 + jitter, 0, 255)
    mask = _pattern_mask(class_index % len(BASE_COLORS), size, rng)
    img = np.where(mask[..., None], foreground, background)
    img = img + rng.normal(0.0, 7.0, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def frame_rng(seed: int, class_index: int, image_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        entropy=seed, spawn_key=(_SYNTH_STREAM, class_index, image_index))))


def generate_dataset(root, per_class: int = 20, seed: int = 0,
                     class_names=None, size: int = 64) -> dict:
    """Write a directory-per-class PNG dataset; returns {class: count}.

    Deterministic: the same (seed, per_class, size) always produces
    byte-identical files.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    names = tuple(class_names) if class_names is not None else DEFAULT_CLASS_NAMES
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.touch()
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output root {root} is not writable: {exc}") from exc
    counts = {}
    for class_index, name in enumerate(sorted(names)):
        class_dir = root / name
        class_dir.mkdir(exist_ok=True)
        for image_index in range(per_class):
            rng = frame_rng(seed, class_index, image_index)
            arr = render_frame(class_index, rng, size=size)
            Image.fromarray(arr, mode="RGB").save(
                class_dir / f"{name.lower().replace(' ', '_')}_{image_index:04d}.png")
        counts[name] = per_class
    return counts


def mean_color_centroids(root, class_names=None):
    """Per-class mean RGB of a generated dataset; the separability oracle."""
    root = Path(root)
    names = tuple(class_names) if class_names is not None else DEFAULT_CLASS_NAMES
    centroids = {}
    per_image = {}
    for name in sorted(names):
        means = []
        for path in sorted((root / name).iterdir()):
            arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
            means.append(arr.reshape(-1, 3).mean(axis=0))
        per_image[name] = np.array(means)
        centroids[name] = np.mean(means, axis=0)
    return centroids, per_image


def nearest_centroid_accuracy(root, class_names=None) -> float:
    """Leave-nothing-out 1-nearest-centroid score on mean RGB features."""
    centroids, per_image = mean_color_centroids(root, class_names)
    names = sorted(centroids)
    anchor = np.array([centroids[n] for n in names])
    correct = 0
    total = 0
    for idx, name in enumerate(names):
        feats = per_image[name]
        dists = ((feats[:, None, :] - anchor[None, :, :]) ** 2).sum(axis=2)
        correct += int((dists.argmin(axis=1) == idx).sum())
        total += feats.shape[0]
    return correct / total
