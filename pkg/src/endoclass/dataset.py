"""Dataset discovery, manifests, and stratified train/val splitting.

The on-disk layout is one subdirectory per class under a root directory,
each holding png/jpg frames.  A manifest indexes every decodable frame
with its integer label and split assignment and can be round-tripped
through a ``path,label,split`` CSV.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (EmptyClass, LabelOutOfRange, TooFewSamples,
                     UnknownClassDir, UnreadableImage)
from .preprocess import ImageTensor, load_raw

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}

# The ten-class default used throughout.  These are the conventional
# capsule-endoscopy finding categories; any class set works, this one is
# just the fallback when none is configured.
DEFAULT_CLASS_NAMES = (
    "Angioectasia", "Bleeding", "Erosion", "Erythema", "Foreign Body",
    "Lymphangiectasia", "Normal", "Polyp", "Ulcer", "Worms",
)

TRAIN = "train"
VAL = "val"
UNASSIGNED = "unassigned"


class ClassSet:
    """An ordered set of class names; indices are lexicographic positions."""

    def __init__(self, names: Sequence[str]):
        cleaned = [str(n) for n in names]
        if any(not n for n in cleaned):
            raise ValueError("class names must be non-empty")
        if len(set(cleaned)) != len(cleaned):
            raise ValueError("class names must be unique")
        if len(cleaned) < 2:
            raise ValueError("need at least 2 classes")
        self.names = tuple(sorted(cleaned))
        self._index = {name: i for i, name in enumerate(self.names)}

    @classmethod
    def default(cls) -> "ClassSet":
        return cls(DEFAULT_CLASS_NAMES)

    def index_of(self, name: str) -> int:
        return self._index[name]

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self._index

    def __eq__(self, other):
        return isinstance(other, ClassSet) and self.names == other.names

    def __repr__(self):
        return f"ClassSet({list(self.names)})"


@dataclass
class LabeledFrame:
    path: str
    label: int
    split: str = UNASSIGNED


@dataclass
class DatasetManifest:
    class_set: ClassSet
    frames: list
    seed: int = 0
    skipped: list = field(default_factory=list)

    def frames_for(self, split: str):
        return [f for f in self.frames if f.split == split]

    def counts_per_class(self) -> np.ndarray:
        counts = np.zeros(len(self.class_set), dtype=np.int64)
        for frame in self.frames:
            counts[frame.label] += 1
        return counts


@dataclass
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")


def scan_dataset(root, class_set: Optional[ClassSet] = None) -> DatasetManifest:
    """Index every decodable image under root/<ClassName>/.

    Undecodable files are logged, skipped, and recorded on
    ``manifest.skipped``.  A class directory not in a supplied class set
    raises UnknownClassDir; a class with zero usable frames raises
    EmptyClass.
    """
    root = Path(root)
    if not root.is_dir():
        raise EmptyClass(f"dataset root {root} is not a directory")
    dirs = sorted(d for d in root.iterdir() if d.is_dir() and not d.name.startswith("."))
    if class_set is None:
        if len(dirs) < 2:
            raise EmptyClass(f"dataset root {root} needs at least 2 class directories")
        class_set = ClassSet([d.name for d in dirs])
    else:
        for d in dirs:
            if d.name not in class_set:
                raise UnknownClassDir(f"directory {d.name!r} is not in the class set")

    frames = []
    skipped = []
    for d in dirs:
        label = class_set.index_of(d.name)
        kept = 0
        for path in sorted(d.iterdir()):
            if not path.is_file() or path.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            try:
                load_raw(path)
            except UnreadableImage as exc:
                log.warning("skipping unreadable image: %s", exc)
                skipped.append(str(path))
                continue
            frames.append(LabeledFrame(str(path), label))
            kept += 1
        if kept == 0:
            raise EmptyClass(f"class directory {d.name!r} has no decodable images")

    seen = {f.label for f in frames}
    for name in class_set.names:
        if class_set.index_of(name) not in seen:
            raise EmptyClass(f"class {name!r} has no frames under {root}")
    return DatasetManifest(class_set=class_set, frames=frames, skipped=skipped)


def _train_count(n: int, fraction: float) -> int:
    # Round half up, then clamp so both splits are non-empty.
    rounded = math.floor(fraction * n + 0.5)
    return min(max(rounded, 1), n - 1)


def stratified_split(manifest: DatasetManifest, spec: SplitSpec) -> DatasetManifest:
    """Assign every frame to train or val, per class, with a seeded shuffle.

    Per class with n frames, exactly round(train_fraction * n) go to
    train (clamped so both splits get at least one frame).  Output is a
    new manifest; frame order is preserved.
    """
    k = len(manifest.class_set)
    by_class = [[] for _ in range(k)]
    for idx, frame in enumerate(manifest.frames):
        if not 0 <= frame.label < k:
            raise LabelOutOfRange(f"label {frame.label} outside [0, {k})")
        by_class[frame.label].append(idx)

    for label, indices in enumerate(by_class):
        if len(indices) < 2:
            raise TooFewSamples(
                f"class {manifest.class_set.names[label]!r} has {len(indices)} "
                f"frame(s); need at least 2 to split"
            )

    rng = np.random.Generator(np.random.PCG64(spec.seed))
    assignment = [VAL] * len(manifest.frames)
    for indices in by_class:
        order = rng.permutation(len(indices))
        n_train = _train_count(len(indices), spec.train_fraction)
        for rank, pos in enumerate(order):
            assignment[indices[pos]] = TRAIN if rank < n_train else VAL

    frames = [LabeledFrame(f.path, f.label, assignment[i])
              for i, f in enumerate(manifest.frames)]
    return DatasetManifest(class_set=manifest.class_set, frames=frames,
                           seed=spec.seed, skipped=list(manifest.skipped))


def load_image(frame: LabeledFrame) -> ImageTensor:
    """Decode one manifest frame into a raw [0, 255] 3xHxW tensor."""
    return load_raw(frame.path)


def write_manifest_csv(manifest: DatasetManifest, path) -> None:
    """Serialize as ``path,label,split`` with class names in the label column."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "split"])
        for frame in manifest.frames:
            writer.writerow([frame.path,
                             manifest.class_set.names[frame.label],
                             frame.split])


def read_manifest_csv(path, class_set: Optional[ClassSet] = None) -> DatasetManifest:
    """Import a pre-split ``path,label,split`` CSV manifest.

    When no class set is given it is inferred from the distinct label
    names in the file.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "label", "split"]:
            raise ValueError(f"manifest {path} has header {header}, "
                             f"expected ['path', 'label', 'split']")
        for row in reader:
            if len(row) != 3:
                raise ValueError(f"manifest {path} has malformed row {row}")
            rows.append(row)
    if class_set is None:
        class_set = ClassSet(sorted({name for _, name, _ in rows}))
    frames = []
    for file_path, name, split in rows:
        if name not in class_set:
            raise UnknownClassDir(f"label {name!r} is not in the class set")
        if split not in (TRAIN, VAL, UNASSIGNED):
            raise ValueError(f"unknown split {split!r} in manifest {path}")
        frames.append(LabeledFrame(file_path, class_set.index_of(name), split))
    return DatasetManifest(class_set=class_set, frames=frames)
