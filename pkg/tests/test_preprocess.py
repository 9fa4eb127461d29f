"""Normalization, resampling and augmentation behaviour."""

import numpy as np
import pytest

from petctseg.errors import ConfigurationError, DimensionError, UsageError
from petctseg.phantom import PhantomSpec, gen_phantom
from petctseg.preprocess import (
    AugmentPolicy, augment, mirror_case, mixup, normalize_ct, normalize_pet,
    preprocess_case, resample_trilinear, rotate_case,
)
from petctseg.volume import Case, Volume


def _vol(values, modality="CT", spacing=(1.0, 1.0, 1.0)):
    return Volume(np.asarray(values, dtype=np.float32), spacing, modality)


# ---------------------------------------------------------------------------
# intensity normalization
# ---------------------------------------------------------------------------

def test_normalize_ct_range_mapping():
    vol = _vol(np.array([[[1024.0, -1024.0, 0.0, 2000.0]]]))
    out = normalize_ct(vol).values[0, 0]
    assert out[0] == 1.0
    assert out[1] == -1.0
    assert out[2] == 0.0
    assert out[3] == 1.0  # clamped
    assert out.min() >= -1.0 and out.max() <= 1.0


def test_normalize_ct_wrong_modality():
    with pytest.raises(UsageError):
        normalize_ct(_vol(np.zeros((2, 2, 2)), "PET"))


def test_normalize_pet_constant_is_zero():
    out = normalize_pet(_vol(np.full((3, 3, 3), 4.2), "PET"))
    assert np.allclose(out.values, 0.0, atol=1e-4)


def test_normalize_pet_two_voxel_hand_case():
    out = normalize_pet(_vol(np.array([0.0, 2.0]).reshape(1, 1, 2), "PET"))
    assert np.allclose(out.values.ravel(), [-1.0, 1.0], atol=1e-6)


def test_normalize_pet_moments():
    rng = np.random.default_rng(0)
    vol = _vol(rng.gamma(2.0, 1.0, size=(6, 6, 6)), "PET")
    out = normalize_pet(vol).values
    assert abs(out.mean(dtype=np.float64)) < 1e-5
    assert abs(out.var(dtype=np.float64) - 1.0) < 1e-3


def test_normalize_pet_idempotent():
    rng = np.random.default_rng(1)
    vol = _vol(rng.gamma(2.0, 1.0, size=(5, 5, 5)), "PET")
    once = normalize_pet(vol)
    twice = normalize_pet(once)
    assert np.max(np.abs(once.values - twice.values)) < 1e-5


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def test_resample_identity_bit_exact():
    rng = np.random.default_rng(2)
    vol = _vol(rng.normal(size=(4, 5, 6)))
    out = resample_trilinear(vol, (1.0, 1.0, 1.0), (4, 5, 6))
    assert out.values.tobytes() == vol.values.tobytes()


def test_resample_constant_stays_constant():
    vol = _vol(np.full((4, 4, 4), 7.5))
    out = resample_trilinear(vol, (0.5, 0.5, 0.5), (8, 8, 8))
    inside = out.values[out.values != -1024.0]
    assert np.allclose(inside, 7.5)


def test_resample_upsample_matches_pointwise_oracle():
    rng = np.random.default_rng(3)
    src = rng.normal(size=(5, 5, 5)).astype(np.float32)
    vol = _vol(src, "PET", spacing=(2.0, 2.0, 2.0))
    tgt_dims, tgt_sp = (9, 9, 9), (1.0, 1.0, 1.0)
    out = resample_trilinear(vol, tgt_sp, tgt_dims).values

    def lerp3(p):
        i0 = np.floor(p).astype(int)
        i0 = np.minimum(np.maximum(i0, 0), np.array(src.shape) - 1)
        i1 = np.minimum(i0 + 1, np.array(src.shape) - 1)
        f = p - i0
        val = 0.0
        for dz, wz in ((0, 1 - f[0]), (1, f[0])):
            for dy, wy in ((0, 1 - f[1]), (1, f[1])):
                for dx, wx in ((0, 1 - f[2]), (1, f[2])):
                    idx = np.where([dz, dy, dx], i1, i0)
                    val += wz * wy * wx * src[idx[0], idx[1], idx[2]]
        return val

    for z in range(9):
        for y in range(9):
            for x in range(9):
                # target grid center-aligned: 9 voxels at 1mm cover 8mm,
                # source 5 voxels at 2mm cover 8mm -> u = (t - 4)/2 + 2
                p = (np.array([z, y, x]) - 4.0) / 2.0 + 2.0
                assert abs(out[z, y, x] - lerp3(p)) < 1e-5


def test_resample_out_of_field_background():
    vol = _vol(np.full((4, 4, 4), 100.0))
    out = resample_trilinear(vol, (1.0, 1.0, 1.0), (8, 8, 8))
    assert out.values[0, 0, 0] == -1024.0
    pet = resample_trilinear(_vol(np.full((4, 4, 4), 3.0), "PET"),
                             (1.0, 1.0, 1.0), (8, 8, 8))
    assert pet.values[0, 0, 0] == 0.0


def test_resample_mask_stays_binary():
    rng = np.random.default_rng(4)
    mask = _vol((rng.random((6, 6, 6)) > 0.6).astype(np.float32), "MASK")
    out = resample_trilinear(mask, (0.7, 0.7, 0.7), (9, 9, 9))
    assert set(np.unique(out.values)) <= {0.0, 1.0}


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _phantom_case(seed=0, **kw):
    return gen_phantom(PhantomSpec(seed=seed, **kw))


def test_zero_rotation_no_mirror_is_identity():
    case = _phantom_case()
    out = rotate_case(case, 0.0)
    for name in ("ct", "pet", "mask"):
        assert out.volumes()[name].values.tobytes() == \
            case.volumes()[name].values.tobytes()
    policy = AugmentPolicy(rotate_prob=0.0, mirror_prob=0.0)
    out = augment(case, policy, np.random.default_rng(0))
    assert out.ct.values.tobytes() == case.ct.values.tobytes()


def test_double_mirror_is_identity():
    case = _phantom_case(seed=1)
    for axis in ("x", "y"):
        out = mirror_case(mirror_case(case, axis), axis)
        for name in ("ct", "pet", "mask"):
            assert out.volumes()[name].values.tobytes() == \
                case.volumes()[name].values.tobytes()


def test_rotation_preserves_ball_volume():
    spec = PhantomSpec(seed=5, tumor_count=(1, 1), distractor_count=(0, 0),
                       noise_level=0.0)
    case = gen_phantom(spec)
    base = case.mask.values.sum()
    for angle in (7.0, 20.0, 33.0, 45.0):
        rotated = rotate_case(case, angle)
        assert abs(rotated.mask.values.sum() - base) < 0.05 * base


def test_rotation_moves_all_volumes_together():
    # tag one off-center voxel in all three volumes; after the transform the
    # hottest voxel must sit at the same place in each
    dims = (9, 15, 15)
    ct = np.zeros(dims, dtype=np.float32)
    pet = np.zeros(dims, dtype=np.float32)
    mask = np.zeros(dims, dtype=np.float32)
    ct[4, 3, 10] = 100.0
    pet[4, 3, 10] = 100.0
    mask[4, 3, 10] = 1.0
    case = Case("tag", _vol(ct), _vol(pet, "PET"), _vol(mask, "MASK"))

    rotated = rotate_case(case, 31.0)
    ct_spot = np.unravel_index(np.argmax(rotated.ct.values), dims)
    pet_spot = np.unravel_index(np.argmax(rotated.pet.values), dims)
    assert ct_spot == pet_spot
    # the nearest-neighbour mask covers the spike's preimage; the image peak
    # must land inside it
    assert rotated.mask.values[ct_spot] == 1.0

    mirrored = mirror_case(case, "x")
    spots = [np.unravel_index(np.argmax(v.values), dims)
             for v in mirrored.volumes().values()]
    assert spots[0] == spots[1] == spots[2] == (4, 3, 4)


def test_augment_requires_aligned_case():
    case = _phantom_case(seed=2)
    bad = Case(case.case_id, case.ct,
               Volume(np.zeros((4, 4, 4)), (1, 1, 1), "PET"), case.mask)
    with pytest.raises(DimensionError):
        augment(bad, AugmentPolicy(), np.random.default_rng(0))


def test_policy_validation():
    with pytest.raises(ConfigurationError):
        AugmentPolicy(rotate_prob=1.5)
    with pytest.raises(ConfigurationError):
        AugmentPolicy(rotate_max_deg=200.0)


# ---------------------------------------------------------------------------
# mixup
# ---------------------------------------------------------------------------

def test_mixup_lambda_one_returns_first_case():
    a, b = _phantom_case(seed=3), _phantom_case(seed=4)
    out = mixup(a, b, 1.0)
    for name in ("ct", "pet", "mask"):
        assert out.volumes()[name].values.tobytes() == \
            a.volumes()[name].values.tobytes()


def test_mixup_half_on_disjoint_one_hots():
    m1 = np.zeros((2, 2, 2), dtype=np.float32)
    m2 = np.zeros((2, 2, 2), dtype=np.float32)
    m1[0, 0, 0] = 1.0
    m2[1, 1, 1] = 1.0
    a = Case("a", _vol(m1 * 0), _vol(m1 * 0, "PET"), _vol(m1, "MASK"))
    b = Case("b", _vol(m2 * 0), _vol(m2 * 0, "PET"), _vol(m2, "MASK"))
    out = mixup(a, b, 0.5)
    assert out.mask.values[0, 0, 0] == 0.5
    assert out.mask.values[1, 1, 1] == 0.5


def test_mixup_half_is_elementwise_average():
    a, b = _phantom_case(seed=6), _phantom_case(seed=7)
    out = mixup(a, b, 0.5)
    for name in ("ct", "pet", "mask"):
        avg = 0.5 * (a.volumes()[name].values + b.volumes()[name].values)
        assert np.max(np.abs(out.volumes()[name].values - avg)) < 1e-7


def test_mixup_masks_stay_in_unit_interval():
    a, b = _phantom_case(seed=8), _phantom_case(seed=9)
    for lam in (0.0, 0.25, 0.5, 0.75, 1.0):
        out = mixup(a, b, lam)
        assert out.mask.values.min() >= 0.0
        assert out.mask.values.max() <= 1.0


def test_mixup_dims_must_match():
    a = _phantom_case(seed=10)
    b = gen_phantom(PhantomSpec(dims=(16, 16, 16), seed=11))
    with pytest.raises(DimensionError):
        mixup(a, b, 0.5)


# ---------------------------------------------------------------------------
# full preprocessing
# ---------------------------------------------------------------------------

def test_preprocess_case_pipeline():
    spec = PhantomSpec(dims=(20, 20, 20), spacing_mm=(1.2, 0.9, 0.9), seed=12)
    case = gen_phantom(spec)
    out = preprocess_case(case, (1.0, 1.0, 1.0), (24, 24, 24))
    assert out.aligned()
    assert out.ct.dims == (24, 24, 24)
    assert out.ct.values.min() >= -1.0 and out.ct.values.max() <= 1.0
    assert abs(out.pet.values.mean(dtype=np.float64)) < 1e-4
    assert set(np.unique(out.mask.values)) <= {0.0, 1.0}
    assert out.mask.values.sum() > 0
