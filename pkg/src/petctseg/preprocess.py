"""Intensity normalization, isotropic resampling and training augmentations.

All functions are pure: they return new volumes/cases and take randomness as
an explicit ``numpy.random.Generator``, so parallel per-case application is
safe and runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, UsageError
from .volume import Case, Volume

_BACKGROUND = {"CT": -1024.0, "PET": 0.0, "MASK": 0.0}


@dataclass(frozen=True)
class AugmentPolicy:
    """Training-time augmentation switches and their probabilities."""

    rotate_prob: float = 0.5
    rotate_max_deg: float = 45.0
    mirror_prob: float = 0.5
    mixup_prob: float = 0.2
    mixup_lambda: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for p in (self.rotate_prob, self.mirror_prob, self.mixup_prob):
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError("probabilities must lie in [0, 1]")
        if not 0.0 <= self.rotate_max_deg <= 180.0:
            raise ConfigurationError("rotate_max_deg must lie in [0, 180]")
        if not 0.0 <= self.mixup_lambda <= 1.0:
            raise ConfigurationError("mixup_lambda must lie in [0, 1]")


def normalize_ct(volume):
    """Clamp Hounsfield values to [-1024, 1024] and divide by 1024."""
    if volume.modality != "CT":
        raise UsageError(f"normalize_ct got a {volume.modality} volume")
    values = np.clip(volume.values, -1024.0, 1024.0) / np.float32(1024.0)
    return Volume(values, volume.spacing_mm, "CT")


def normalize_pet(volume, eps=1e-8):
    """Standardise SUVs: (x - mean) / sqrt(var + eps), whole-volume moments."""
    if volume.modality != "PET":
        raise UsageError(f"normalize_pet got a {volume.modality} volume")
    mu = volume.values.mean(dtype=np.float64)
    var = volume.values.var(dtype=np.float64)
    values = (volume.values - mu) / np.sqrt(var + eps)
    return Volume(values, volume.spacing_mm, "PET")


def _source_positions(n_src, sp_src, n_dst, sp_dst):
    """Continuous source indices for target samples, FOV centers aligned."""
    tgt = (np.arange(n_dst, dtype=np.float64) - (n_dst - 1) / 2.0) * sp_dst
    return tgt / sp_src + (n_src - 1) / 2.0


def _gather_lerp(arr, axis, pos):
    """Linear interpolation along one axis at clamped positions."""
    n = arr.shape[axis]
    clamped = np.clip(pos, 0.0, n - 1)
    i0 = np.floor(clamped).astype(np.intp)
    frac = (clamped - i0).astype(arr.dtype)
    i1 = np.minimum(i0 + 1, n - 1)
    exact = frac == 0.0
    i1[exact] = i0[exact]
    x0 = np.take(arr, i0, axis=axis)
    x1 = np.take(arr, i1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = len(pos)
    return x0 + frac.reshape(shape) * (x1 - x0)


def resample_trilinear(volume, target_spacing_mm, target_dims):
    """Resample onto a new grid with aligned field-of-view centers.

    CT and PET interpolate trilinearly; MASK uses nearest neighbour so labels
    stay binary. Samples falling outside the source field take the modality
    background (CT -1024, PET 0, MASK 0). Identity resamples return a
    bit-identical copy.
    """
    target_spacing_mm = tuple(float(s) for s in target_spacing_mm)
    target_dims = tuple(int(d) for d in target_dims)
    if any(s <= 0 for s in target_spacing_mm):
        raise ConfigurationError("target spacing must be positive")
    if volume.dims == target_dims and volume.spacing_mm == target_spacing_mm:
        return volume.copy()

    positions = [
        _source_positions(volume.dims[a], volume.spacing_mm[a],
                          target_dims[a], target_spacing_mm[a])
        for a in range(3)
    ]
    outside = np.zeros(target_dims, dtype=bool)
    for a, pos in enumerate(positions):
        bad = (pos < 0.0) | (pos > volume.dims[a] - 1)
        shape = [1, 1, 1]
        shape[a] = target_dims[a]
        outside |= bad.reshape(shape)

    if volume.modality == "MASK":
        idx = [np.clip(np.floor(pos + 0.5).astype(np.intp), 0,
                       volume.dims[a] - 1)
               for a, pos in enumerate(positions)]
        values = volume.values[np.ix_(idx[0], idx[1], idx[2])]
        values = values.copy()
    else:
        values = volume.values
        for a, pos in enumerate(positions):
            values = _gather_lerp(values, a, pos)
    values[outside] = _BACKGROUND[volume.modality]
    return Volume(values, target_spacing_mm, volume.modality)


def _rotate_axial(values, angle_deg, spacing_mm, nearest, fill):
    """Rotate about the z axis; angles in degrees, physical-space correct."""
    if angle_deg == 0.0:
        return values.copy()
    d, h, w = values.shape
    sy, sx = spacing_mm[1], spacing_mm[2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    py = (yy - cy) * sy
    px = (xx - cx) * sx
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    # inverse mapping: target point pulled back into the source frame
    qy = c * py + s * px
    qx = -s * py + c * px
    uy = qy / sy + cy
    ux = qx / sx + cx
    outside = (uy < 0) | (uy > h - 1) | (ux < 0) | (ux > w - 1)

    if nearest:
        iy = np.clip(np.floor(uy + 0.5).astype(np.intp), 0, h - 1)
        ix = np.clip(np.floor(ux + 0.5).astype(np.intp), 0, w - 1)
        out = values[:, iy, ix].copy()
    else:
        uy_c = np.clip(uy, 0, h - 1)
        ux_c = np.clip(ux, 0, w - 1)
        y0 = np.floor(uy_c).astype(np.intp)
        x0 = np.floor(ux_c).astype(np.intp)
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        fy = (uy_c - y0).astype(values.dtype)
        fx = (ux_c - x0).astype(values.dtype)
        v00 = values[:, y0, x0]
        v01 = values[:, y0, x1]
        v10 = values[:, y1, x0]
        v11 = values[:, y1, x1]
        top = v00 + fx * (v01 - v00)
        bot = v10 + fx * (v11 - v10)
        out = top + fy * (bot - top)
    out[:, outside] = fill
    return out


def rotate_case(case, angle_deg):
    """One shared z-axis rotation: trilinear for images, nearest for mask.

    Rotated-out regions fill with each image volume's minimum value (the
    background by construction) and 0 for the mask.
    """
    def rot(vol, nearest, fill):
        vals = _rotate_axial(vol.values, angle_deg, vol.spacing_mm,
                             nearest, fill)
        return Volume(vals, vol.spacing_mm, vol.modality)

    return Case(
        case.case_id,
        ct=rot(case.ct, False, float(case.ct.values.min())),
        pet=rot(case.pet, False, float(case.pet.values.min())),
        mask=rot(case.mask, True, 0.0),
    )


def mirror_case(case, axis):
    """Flip all three volumes along 'x' or 'y' (exact, involutive)."""
    ax = {"y": 1, "x": 2}.get(axis)
    if ax is None:
        raise UsageError(f"mirror axis must be 'x' or 'y', got {axis!r}")

    def flip(vol):
        return Volume(np.flip(vol.values, axis=ax).copy(),
                      vol.spacing_mm, vol.modality)

    return Case(case.case_id, ct=flip(case.ct), pet=flip(case.pet),
                mask=flip(case.mask))


def augment(case, policy, rng):
    """Apply the stochastic geometric augmentations to one case.

    With ``rotate_prob``, all three volumes rotate by one shared angle drawn
    uniformly from [0, rotate_max_deg] about the z axis; with ``mirror_prob``
    they flip along a uniformly chosen in-plane axis. CT, PET and mask always
    receive the same transform.
    """
    if not case.aligned():
        raise DimensionError("augment expects aligned case volumes")
    out = case
    if rng.random() < policy.rotate_prob:
        angle = float(rng.uniform(0.0, policy.rotate_max_deg))
        out = rotate_case(out, angle)
    if rng.random() < policy.mirror_prob:
        axis = "x" if rng.random() < 0.5 else "y"
        out = mirror_case(out, axis)
    return out


def mixup(case1, case2, lam):
    """Convex combination of two cases, labels included (soft masks)."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError("mixup lambda must lie in [0, 1]")
    for name in ("ct", "pet", "mask"):
        if case1.volumes()[name].dims != case2.volumes()[name].dims:
            raise DimensionError(f"mixup cases disagree on {name} dims")
    if lam == 1.0:
        return case1.copy()
    if lam == 0.0:
        return Case(case1.case_id, case2.ct.copy(), case2.pet.copy(),
                    case2.mask.copy())

    l32 = np.float32(lam)

    def mix(a, b):
        vals = l32 * a.values + (np.float32(1.0) - l32) * b.values
        if a.modality == "MASK":
            vals = np.clip(vals, 0.0, 1.0)
        return Volume(vals, a.spacing_mm, a.modality)

    return Case(case1.case_id,
                ct=mix(case1.ct, case2.ct),
                pet=mix(case1.pet, case2.pet),
                mask=mix(case1.mask, case2.mask))


def preprocess_case(case, target_spacing_mm, target_dims):
    """Resample to the target grid, then normalize CT and PET intensities."""
    ct = resample_trilinear(case.ct, target_spacing_mm, target_dims)
    pet = resample_trilinear(case.pet, target_spacing_mm, target_dims)
    mask = resample_trilinear(case.mask, target_spacing_mm, target_dims)
    return Case(case.case_id, ct=normalize_ct(ct), pet=normalize_pet(pet),
                mask=mask)
