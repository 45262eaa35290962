"""Pipeline-stage tests: resize, scaling, normalization, augmentation."""

import numpy as np
import pytest
from PIL import Image

from endoclass.dataset import LabeledFrame
from endoclass.errors import WrongRangeState
from endoclass.preprocess import (RAW, UNIT, NORMALIZED, AugmentationPolicy,
                                  FrameCache, ImageTensor, NormalizationStats,
                                  apply_pipeline, iter_eval_batches, load_raw,
                                  normalize, random_horizontal_flip,
                                  random_rotation, resize, sample_rng, to_unit)


def raw_image(h=16, w=16, seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    return ImageTensor(rng.integers(0, 256, size=(3, h, w)).astype(np.float64), RAW)


def write_png(path, h=32, w=32, seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    arr = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)
    return path


# --- tensors --------------------------------------------------------------------

def test_image_tensor_rejects_bad_shapes():
    with pytest.raises(ValueError):
        ImageTensor(np.zeros((16, 16)))
    with pytest.raises(ValueError):
        ImageTensor(np.zeros((4, 16, 16)))
    with pytest.raises(ValueError):
        ImageTensor(np.zeros((3, 16, 16)), range_state="half-cooked")


def test_stats_validation():
    with pytest.raises(ValueError):
        NormalizationStats(std=(0.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        NormalizationStats(mean=(0.5, 0.5))
    stats = NormalizationStats()
    assert stats.mean == (0.485, 0.456, 0.406)
    assert stats.std == (0.229, 0.224, 0.225)


# --- resize ---------------------------------------------------------------------

def test_resize_downscales_to_target():
    img = raw_image(576, 576)
    out = resize(img, (224, 224))
    assert out.data.shape == (3, 224, 224)
    assert out.range_state == RAW


def test_resize_identity_is_exact_copy():
    img = raw_image(20, 30)
    out = resize(img, (20, 30))
    np.testing.assert_array_equal(out.data, img.data)
    out.data[0, 0, 0] = -1.0
    assert img.data[0, 0, 0] != -1.0


def test_resize_preserves_constant_images():
    img = ImageTensor(np.full((3, 50, 40), 3.14), RAW)
    out = resize(img, (21, 17))
    # float32 round trip inside PIL bounds the error
    np.testing.assert_allclose(out.data, 3.14, atol=1e-6)


# --- value scaling ----------------------------------------------------------------

def test_to_unit_endpoints_and_fifth():
    img = ImageTensor(np.stack([np.full((2, 2), 255.0),
                                np.full((2, 2), 0.0),
                                np.full((2, 2), 51.0)]), RAW)
    out = to_unit(img)
    assert out.range_state == UNIT
    assert float(out.data[0, 0, 0]) == 1.0
    assert float(out.data[1, 0, 0]) == 0.0
    assert float(out.data[2, 0, 0]) == 0.2


def test_to_unit_rejects_non_raw():
    unit = to_unit(raw_image())
    with pytest.raises(WrongRangeState):
        to_unit(unit)


def test_normalize_midpoint_hits_zero():
    img = ImageTensor(np.full((3, 4, 4), 0.5), UNIT)
    out = normalize(img, NormalizationStats(mean=(0.5,) * 3, std=(0.5,) * 3))
    assert out.range_state == NORMALIZED
    np.testing.assert_array_equal(out.data, np.zeros((3, 4, 4)))


def test_normalize_identity_stats_passthrough():
    img = to_unit(raw_image(seed=7))
    out = normalize(img, NormalizationStats(mean=(0.0,) * 3, std=(1.0,) * 3))
    np.testing.assert_array_equal(out.data, img.data)


def test_normalize_default_black_level():
    img = ImageTensor(np.zeros((3, 2, 2)), UNIT)
    out = normalize(img, NormalizationStats())
    assert out.data[0, 0, 0] == pytest.approx(-2.1179, abs=1e-4)


def test_normalize_rejects_raw():
    with pytest.raises(WrongRangeState):
        normalize(raw_image(), NormalizationStats())


def test_scaled_values_stay_inside_analytic_bounds():
    # fuzz: normalize(to_unit(x)) is bounded by the endpoint images
    stats = NormalizationStats()
    lo = min((0.0 - m) / s for m, s in zip(stats.mean, stats.std))
    hi = max((1.0 - m) / s for m, s in zip(stats.mean, stats.std))
    rng = np.random.Generator(np.random.PCG64(2024))
    for trial in range(50):
        h, w = int(rng.integers(2, 40)), int(rng.integers(2, 40))
        img = ImageTensor(rng.integers(0, 256, size=(3, h, w)).astype(float), RAW)
        out = normalize(to_unit(img), stats)
        assert out.data.min() >= lo - 1e-12, f"trial {trial}"
        assert out.data.max() <= hi + 1e-12, f"trial {trial}"


# --- augmentation -----------------------------------------------------------------

def test_flip_is_a_bitwise_involution():
    img = raw_image(9, 13, seed=3)
    always = AugmentationPolicy(hflip_prob=1.0)
    rng = np.random.Generator(np.random.PCG64(0))
    once = random_horizontal_flip(img, always, rng)
    twice = random_horizontal_flip(once, always, rng)
    assert not np.array_equal(once.data, img.data)
    np.testing.assert_array_equal(twice.data, img.data)


def test_flip_of_symmetric_image_is_invisible():
    half = np.arange(3 * 8 * 4, dtype=np.float64).reshape(3, 8, 4)
    img = ImageTensor(np.concatenate([half, half[:, :, ::-1]], axis=2), RAW)
    out = random_horizontal_flip(img, AugmentationPolicy(hflip_prob=1.0),
                                 np.random.Generator(np.random.PCG64(0)))
    np.testing.assert_array_equal(out.data, img.data)


def test_flip_prob_zero_never_flips():
    img = raw_image(seed=5)
    policy = AugmentationPolicy(hflip_prob=0.0)
    rng = np.random.Generator(np.random.PCG64(1))
    for _ in range(20):
        out = random_horizontal_flip(img, policy, rng)
        np.testing.assert_array_equal(out.data, img.data)


@pytest.mark.parametrize("op,policy", [
    (random_horizontal_flip, AugmentationPolicy(hflip_prob=0.5)),
    (random_rotation, AugmentationPolicy(rotation_max_deg=10.0)),
])
def test_augment_ops_draw_exactly_one_number(op, policy):
    img = raw_image(seed=9)
    rng = np.random.Generator(np.random.PCG64(77))
    op(img, policy, rng)
    mirror = np.random.Generator(np.random.PCG64(77))
    mirror.random()  # the single draw the op must have consumed
    assert rng.random() == mirror.random()


def test_rotation_zero_degrees_is_identity():
    img = raw_image(seed=11)
    out = random_rotation(img, AugmentationPolicy(rotation_max_deg=0.0),
                          np.random.Generator(np.random.PCG64(4)))
    np.testing.assert_array_equal(out.data, img.data)


def test_rotation_preserves_shape_and_constant_interior():
    img = ImageTensor(np.full((3, 33, 33), 7.0), RAW)
    out = random_rotation(img, AugmentationPolicy(rotation_max_deg=10.0),
                          np.random.Generator(np.random.PCG64(8)))
    assert out.data.shape == (3, 33, 33)
    # the center of a constant image survives any small rotation
    np.testing.assert_allclose(out.data[:, 12:21, 12:21], 7.0, atol=1e-9)


def test_policy_validation():
    with pytest.raises(ValueError):
        AugmentationPolicy(hflip_prob=1.5)
    with pytest.raises(ValueError):
        AugmentationPolicy(rotation_max_deg=-2.0)


def test_sample_rng_streams_are_distinct_and_stable():
    a1 = sample_rng(0, epoch=1, index=4).random(4)
    a2 = sample_rng(0, epoch=1, index=4).random(4)
    b = sample_rng(0, epoch=1, index=5).random(4)
    c = sample_rng(0, epoch=2, index=4).random(4)
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, b)
    assert not np.array_equal(a1, c)


# --- whole pipeline ---------------------------------------------------------------

def test_val_pipeline_is_bit_deterministic(tmp_path):
    frame = LabeledFrame(str(write_png(tmp_path / "f.png", 40, 40)), 2)
    stats = NormalizationStats()
    policy = AugmentationPolicy()
    a, la = apply_pipeline(frame, "val", policy, stats, size=(24, 24))
    b, lb = apply_pipeline(frame, "val", policy, stats, size=(24, 24))
    np.testing.assert_array_equal(a.data, b.data)
    assert (la, lb) == (2, 2)
    assert a.range_state == NORMALIZED


def test_train_pipeline_seeded_determinism(tmp_path):
    frame = LabeledFrame(str(write_png(tmp_path / "f.png", 40, 40)), 0)
    stats = NormalizationStats()
    policy = AugmentationPolicy()
    a, _ = apply_pipeline(frame, "train", policy, stats, size=(24, 24),
                          rng=sample_rng(3, 1, 0))
    b, _ = apply_pipeline(frame, "train", policy, stats, size=(24, 24),
                          rng=sample_rng(3, 1, 0))
    c, _ = apply_pipeline(frame, "train", policy, stats, size=(24, 24),
                          rng=sample_rng(3, 2, 0))
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_train_pipeline_requires_rng(tmp_path):
    frame = LabeledFrame(str(write_png(tmp_path / "f.png")), 0)
    with pytest.raises(ValueError):
        apply_pipeline(frame, "train", AugmentationPolicy(),
                       NormalizationStats(), size=(16, 16))


def test_default_size_yields_finite_224_tensor(tmp_path):
    frame = LabeledFrame(str(write_png(tmp_path / "f.png", 576, 576)), 1)
    img, _ = apply_pipeline(frame, "val", AugmentationPolicy(),
                            NormalizationStats())
    assert img.data.shape == (3, 224, 224)
    assert np.all(np.isfinite(img.data))


def test_cache_hands_out_copies(tmp_path):
    path = write_png(tmp_path / "f.png", 30, 30)
    cache = FrameCache()
    first = cache.get_raw_resized(path, (16, 16))
    first.data[:] = 0.0
    second = cache.get_raw_resized(path, (16, 16))
    assert second.data.max() > 0.0
    np.testing.assert_array_equal(second.data,
                                  resize(load_raw(path), (16, 16)).data)


def test_eval_batches_shapes_and_order(tmp_path):
    frames = [LabeledFrame(str(write_png(tmp_path / f"{i}.png", seed=i)), i % 3)
              for i in range(7)]
    batches = list(iter_eval_batches(frames, NormalizationStats(), (16, 16),
                                     batch_size=3))
    assert [x.shape for x, _ in batches] == \
           [(3, 3, 16, 16), (3, 3, 16, 16), (1, 3, 16, 16)]
    got = np.concatenate([y for _, y in batches])
    np.testing.assert_array_equal(got, [i % 3 for i in range(7)])
