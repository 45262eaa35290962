"""
From a directory of images to model-ready tensors
=================================================

Walk one frame through every stage the training loop applies: discovery
and labeling, the stratified 80:20 split, bilinear resize, the two
random augmentations, and the two value-scaling steps.  Each stage is a
small pure function over an ImageTensor that carries its value-range
state, so the stages cannot be applied out of order.
"""

from pathlib import Path

import numpy as np

from endoclass.dataset import SplitSpec, scan_dataset, stratified_split
from endoclass.preprocess import (AugmentationPolicy, NormalizationStats,
                                  load_raw, normalize, random_horizontal_flip,
                                  random_rotation, resize, sample_rng, to_unit)
from endoclass.synth import generate_dataset

scratch = Path(__file__).parent / "output" / "dataset_demo"
generate_dataset(scratch / "data", per_class=10, seed=3)

# Discovery: one subdirectory per class, indices assigned alphabetically.
manifest = scan_dataset(scratch / "data")
print(f"found {len(manifest.frames)} frames in {len(manifest.class_set)} classes")
for name, count in zip(manifest.class_set.names, manifest.counts_per_class()):
    print(f"  {name:18s} {count}")

# The split is stratified: every class contributes 80% of its frames to
# train, and the same seed always produces the same assignment.
manifest = stratified_split(manifest, SplitSpec(train_fraction=0.8, seed=7))
train = manifest.frames_for("train")
val = manifest.frames_for("val")
print(f"\nsplit: {len(train)} train / {len(val)} val")

# Now follow a single training frame through the pipeline.
frame = train[0]
img = load_raw(frame.path)
print(f"\n{Path(frame.path).name}  ->  raw {img.data.shape}, "
      f"values in [{img.data.min():.0f}, {img.data.max():.0f}]")

img = resize(img, (224, 224))
print(f"resized        -> {img.data.shape}")

# Augmentation draws from a stream keyed by (seed, epoch, frame index),
# so every sample owns its own reproducible randomness.
policy = AugmentationPolicy(hflip_prob=0.5, rotation_max_deg=10.0)
rng = sample_rng(seed=7, epoch=1, index=0)
img = random_horizontal_flip(img, policy, rng)
img = random_rotation(img, policy, rng)
print("augmented      -> flip + rotation applied")

img = to_unit(img)
print(f"unit scaled    -> values in [{img.data.min():.3f}, {img.data.max():.3f}]")

stats = NormalizationStats()  # the conventional per-channel mean/std
img = normalize(img, stats)
print(f"normalized     -> mean {img.data.mean():+.3f}, std {img.data.std():.3f}")

# The val pipeline skips both augmentations, which makes it a pure
# function of the file: running it twice gives bit-identical tensors.
a = normalize(to_unit(resize(load_raw(val[0].path), (224, 224))), stats)
b = normalize(to_unit(resize(load_raw(val[0].path), (224, 224))), stats)
print(f"\nval pipeline deterministic: {np.array_equal(a.data, b.data)}")
