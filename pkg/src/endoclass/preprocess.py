"""Image tensors and the raw -> unit -> normalized preprocessing pipeline.

Every image is carried as a 3xHxW float64 array tagged with an explicit
value-range state so that the scaling steps cannot be applied twice or
out of order.  The train pipeline is ``load -> resize -> flip -> rotate
-> to_unit -> normalize``; the val pipeline skips the two augmentations
and is a pure function of the file contents.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import UnreadableImage, WrongRangeState

if TYPE_CHECKING:
    from .dataset import LabeledFrame

RAW = "raw"
UNIT = "unit"
NORMALIZED = "normalized"

# Conventional natural-image channel statistics; configurable everywhere.
DEFAULT_MEAN = (0.485, 0.456, 0.406)
DEFAULT_STD = (0.229, 0.224, 0.225)

DEFAULT_INPUT_SIZE = 224


@dataclass
class ImageTensor:
    """A 3xHxW float image plus the state its values are in."""

    data: np.ndarray
    range_state: str = RAW

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ValueError(f"expected 3xHxW data, got shape {self.data.shape}")
        if self.data.shape[1] < 1 or self.data.shape[2] < 1:
            raise ValueError("H and W must be positive")
        if self.range_state not in (RAW, UNIT, NORMALIZED):
            raise ValueError(f"unknown range state {self.range_state!r}")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class NormalizationStats:
    mean: tuple = DEFAULT_MEAN
    std: tuple = DEFAULT_STD

    def __post_init__(self):
        self.mean = tuple(float(m) for m in self.mean)
        self.std = tuple(float(s) for s in self.std)
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("mean and std must have 3 components")
        if any(s <= 0 for s in self.std):
            raise ValueError("std components must be positive")


@dataclass
class AugmentationPolicy:
    """Random horizontal flips and rotations, train split only."""

    hflip_prob: float = 0.5
    rotation_max_deg: float = 10.0
    enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0, 1]")
        if self.rotation_max_deg < 0:
            raise ValueError("rotation_max_deg must be >= 0")


def load_raw(path) -> ImageTensor:
    """Decode an image file into a raw [0, 255] tensor.

    Grayscale files are promoted to three identical channels.  Raises
    UnreadableImage for anything PIL cannot fully decode.
    """
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float64)
    except (OSError, ValueError, SyntaxError) as exc:
        raise UnreadableImage(f"cannot decode {path}: {exc}") from exc
    return ImageTensor(arr.transpose(2, 0, 1), RAW)


def resize(img: ImageTensor, size) -> ImageTensor:
    """Bilinear resize to (H', W'); the value-range state is preserved."""
    out_h, out_w = int(size[0]), int(size[1])
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be positive")
    if (out_h, out_w) == img.data.shape[1:]:
        return ImageTensor(img.data.copy(), img.range_state)
    channels = []
    for c in range(3):
        plane = Image.fromarray(img.data[c].astype(np.float32), mode="F")
        plane = plane.resize((out_w, out_h), Image.BILINEAR)
        channels.append(np.asarray(plane, dtype=np.float64))
    return ImageTensor(np.stack(channels), img.range_state)


def to_unit(img: ImageTensor) -> ImageTensor:
    """Scale raw [0, 255] values down to [0, 1]."""
    if img.range_state != RAW:
        raise WrongRangeState(f"to_unit expects raw input, got {img.range_state!r}")
    return ImageTensor(img.data / 255.0, UNIT)


def normalize(img: ImageTensor, stats: NormalizationStats) -> ImageTensor:
    """Per-channel (x - mean) / std standardization of a unit-range image."""
    if img.range_state != UNIT:
        raise WrongRangeState(f"normalize expects unit input, got {img.range_state!r}")
    mean = np.asarray(stats.mean, dtype=np.float64).reshape(3, 1, 1)
    std = np.asarray(stats.std, dtype=np.float64).reshape(3, 1, 1)
    return ImageTensor((img.data - mean) / std, NORMALIZED)


def random_horizontal_flip(img: ImageTensor, policy: AugmentationPolicy,
                           rng: np.random.Generator) -> ImageTensor:
    """Reverse the width axis with probability hflip_prob.

    Draws exactly one random number regardless of the outcome so that
    seeded pipelines stay aligned.
    """
    u = rng.random()
    if u < policy.hflip_prob:
        return ImageTensor(img.data[:, :, ::-1].copy(), img.range_state)
    return img


def random_rotation(img: ImageTensor, policy: AugmentationPolicy,
                    rng: np.random.Generator) -> ImageTensor:
    """Rotate by a uniform angle in [-max_deg, +max_deg] about the center.

    Bilinear resampling, out-of-bounds filled with 0, output shape
    unchanged.  Draws exactly one random number.
    """
    theta = rng.uniform(-policy.rotation_max_deg, policy.rotation_max_deg)
    if theta == 0.0:
        return img
    rotated = ndimage.rotate(
        img.data, angle=theta, axes=(-2, -1), reshape=False,
        order=1, mode="constant", cval=0.0, prefilter=False,
    )
    return ImageTensor(rotated, img.range_state)


# First spawn-key element namespaces the augmentation streams away from
# the shuffle/init streams derived from the same seed.
_AUGMENT_STREAM = 0xA76


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent per-sample RNG stream derived from (seed, epoch, index).

    Each sample owns its own generator, so preprocessing may run per
    sample in parallel without changing results.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        entropy=seed, spawn_key=(_AUGMENT_STREAM, epoch, index))))


class FrameCache:
    """Optional in-memory cache of decoded + resized raw tensors.

    Decode and resize are pure functions of (path, size), so caching them
    is safe; augmentation and scaling always run downstream of the cache.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._store: dict = {}

    def get_raw_resized(self, path, size) -> ImageTensor:
        key = (str(path), tuple(size))
        if self.enabled and key in self._store:
            data = self._store[key]
            return ImageTensor(data.copy(), RAW)
        img = resize(load_raw(path), size)
        if self.enabled:
            self._store[key] = img.data.copy()
        return img


def apply_pipeline(frame: "LabeledFrame", split: str, policy: AugmentationPolicy,
                   stats: NormalizationStats, size=(DEFAULT_INPUT_SIZE, DEFAULT_INPUT_SIZE),
                   rng: Optional[np.random.Generator] = None,
                   cache: Optional[FrameCache] = None):
    """Produce a model-ready (normalized tensor, label) pair for one frame.

    The val split never augments and therefore never consumes ``rng``;
    the train split flips then rotates, drawing exactly two numbers.
    """
    if cache is not None:
        img = cache.get_raw_resized(frame.path, size)
    else:
        img = resize(load_raw(frame.path), size)
    if split == "train" and policy.enabled:
        if rng is None:
            raise ValueError("train-split augmentation requires an rng")
        img = random_horizontal_flip(img, policy, rng)
        img = random_rotation(img, policy, rng)
    img = normalize(to_unit(img), stats)
    return img, frame.label


def iter_eval_batches(frames, stats: NormalizationStats, size, batch_size: int,
                      cache: Optional[FrameCache] = None):
    """Yield (x, y) batches along the deterministic val-style path.

    x is B x 3 x H x W float64, y is a B-vector of int labels.  Frame
    order is preserved.
    """
    no_augment = AugmentationPolicy(enabled=False)
    for start in range(0, len(frames), batch_size):
        chunk = frames[start:start + batch_size]
        tensors = []
        labels = []
        for frame in chunk:
            img, label = apply_pipeline(frame, "val", no_augment, stats,
                                        size=size, cache=cache)
            tensors.append(img.data)
            labels.append(label)
        yield np.stack(tensors), np.asarray(labels, dtype=np.int64)
