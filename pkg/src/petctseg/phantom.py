"""Deterministic synthetic dual-modality phantoms.

Each phantom is an ellipsoidal "body" (soft tissue inside a bone shell,
air outside) carrying tumor ellipsoids and, crucially, distractor hot spots:
regions that glow in PET exactly like tumors but have no CT contrast and no
mask label. They make PET-only thresholding provably insufficient, the way
high-metabolism organs do in real scans.

Everything derives from a single seed, so the same spec regenerates the same
case bit for bit. The geometry is drawn before any noise, which lets callers
re-derive region masks (e.g. where the distractors sit) without re-running
the noisy synthesis.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError
from .volume import Case, Volume

_PLACEMENT_TRIES = 500
_LAYOUT_TRIES = 20


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for one phantom; ranges are inclusive (lo, hi) pairs.

    Intensity bands are Hounsfield-unit-like for CT and SUV-like for PET.
    ``noise_level`` scales Gaussian noise on both image modalities: the CT
    sigma is ``20 * noise_level`` HU and the PET sigma ``0.2 * noise_level``
    SUV. Masks stay noise-free. The tumor and distractor SUV bands must
    overlap so distractors are bright enough to fool PET-only thresholding.
    """

    dims: tuple = (24, 24, 24)
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    tumor_count: tuple = (1, 2)
    tumor_radius_vox: tuple = (2.5, 3.5)
    distractor_count: tuple = (1, 2)
    ct_air_hu: float = -1000.0
    ct_tissue_hu: tuple = (20.0, 60.0)
    ct_bone_hu: tuple = (600.0, 800.0)
    ct_tumor_hu: tuple = (50.0, 70.0)
    pet_background_suv: tuple = (0.3, 0.7)
    pet_tumor_suv: tuple = (4.0, 8.0)
    pet_distractor_suv: tuple = (4.0, 8.0)
    noise_level: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if min(self.dims) < 8:
            raise ConfigurationError("phantom dims must be at least 8 voxels")
        if self.tumor_radius_vox[0] > self.tumor_radius_vox[1]:
            raise ConfigurationError("tumor radius range must be (lo, hi)")
        t_lo, t_hi = self.pet_tumor_suv
        d_lo, d_hi = self.pet_distractor_suv
        if d_lo > t_hi or t_lo > d_hi:
            raise ConfigurationError(
                "tumor and distractor SUV bands must overlap")
        if self.tumor_radius_vox[1] * 2.0 >= min(self.dims):
            raise ConfigurationError(
                f"tumors of radius up to {self.tumor_radius_vox[1]} cannot "
                f"fit in dims {self.dims}")


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple  # (z, y, x) voxel coordinates
    radii: tuple   # per-axis semi-axes in voxels

    def inside(self, zz, yy, xx):
        cz, cy, cx = self.center
        rz, ry, rx = self.radii
        return (((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2
                + ((xx - cx) / rx) ** 2) <= 1.0


@dataclass(frozen=True)
class PhantomGeometry:
    """Noise-free layout of one phantom, fully determined by the spec seed."""

    body: Ellipsoid
    shell_fraction: float
    tumors: tuple
    distractors: tuple
    tissue_hu: float
    bone_hu: float
    tumor_hu: tuple           # per tumor
    background_suv: float
    tumor_suv: tuple          # per tumor
    distractor_suv: tuple     # per distractor


def _grid(dims):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims),
                       indexing="ij")


def rasterize(ellipsoids, dims):
    """Boolean union of ellipsoid interiors on the voxel grid."""
    zz, yy, xx = _grid(dims)
    mask = np.zeros(dims, dtype=bool)
    for e in ellipsoids:
        mask |= e.inside(zz, yy, xx)
    return mask


def _sample_blob(rng, spec, body, taken):
    """Try to place one ellipsoid inside the body, disjoint from ``taken``."""
    r_lo, r_hi = spec.tumor_radius_vox
    cz, cy, cx = body.center
    for _ in range(_PLACEMENT_TRIES):
        r = rng.uniform(r_lo, r_hi)
        radii = tuple(r * rng.uniform(0.8, 1.2) for _ in range(3))
        offs = [rng.uniform(-0.8, 0.8) * (body.radii[a] - radii[a])
                for a in range(3)]
        cand = Ellipsoid((cz + offs[0], cy + offs[1], cx + offs[2]), radii)
        if any(_overlaps(cand, other) for other in taken):
            continue
        return cand
    return None


def _overlaps(a, b):
    dist = np.sqrt(sum((a.center[i] - b.center[i]) ** 2 for i in range(3)))
    return dist < (max(a.radii) + max(b.radii))


def _sample_layout(rng, spec, body, n_tum, n_dis):
    """Place all blobs, restarting the whole layout when one gets stuck."""
    for _ in range(_LAYOUT_TRIES):
        taken = []
        for _ in range(n_tum + n_dis):
            blob = _sample_blob(rng, spec, body, taken)
            if blob is None:
                break
            taken.append(blob)
        else:
            return taken[:n_tum], taken[n_tum:]
    raise ConfigurationError(
        f"could not place {n_tum} tumors and {n_dis} distractors of radius "
        f"{spec.tumor_radius_vox} in dims {spec.dims}")


def phantom_geometry(spec):
    """Draw the deterministic, noise-free layout for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    dims = spec.dims
    center = tuple((n - 1) / 2.0 + rng.uniform(-0.05, 0.05) * n for n in dims)
    body = Ellipsoid(center,
                     tuple(rng.uniform(0.38, 0.45) * n for n in dims))
    shell_fraction = rng.uniform(0.82, 0.92)

    n_tum = int(rng.integers(spec.tumor_count[0], spec.tumor_count[1] + 1))
    n_dis = int(rng.integers(spec.distractor_count[0],
                             spec.distractor_count[1] + 1))
    tumors, distractors = _sample_layout(rng, spec, body, n_tum, n_dis)

    return PhantomGeometry(
        body=body,
        shell_fraction=shell_fraction,
        tumors=tuple(tumors),
        distractors=tuple(distractors),
        tissue_hu=float(rng.uniform(*spec.ct_tissue_hu)),
        bone_hu=float(rng.uniform(*spec.ct_bone_hu)),
        tumor_hu=tuple(float(rng.uniform(*spec.ct_tumor_hu))
                       for _ in range(n_tum)),
        background_suv=float(rng.uniform(*spec.pet_background_suv)),
        tumor_suv=tuple(float(rng.uniform(*spec.pet_tumor_suv))
                        for _ in range(n_tum)),
        distractor_suv=tuple(float(rng.uniform(*spec.pet_distractor_suv))
                             for _ in range(n_dis)),
    )


def gen_phantom(spec, case_id=None):
    """Synthesize one Case: CT anatomy, PET uptake, noise-free tumor mask."""
    geo = phantom_geometry(spec)
    dims = spec.dims
    zz, yy, xx = _grid(dims)

    body_in = geo.body.inside(zz, yy, xx)
    core = Ellipsoid(geo.body.center,
                     tuple(r * geo.shell_fraction for r in geo.body.radii))
    core_in = core.inside(zz, yy, xx)
    shell = body_in & ~core_in

    ct = np.full(dims, spec.ct_air_hu, dtype=np.float64)
    ct[core_in] = geo.tissue_hu
    ct[shell] = geo.bone_hu
    pet = np.full(dims, geo.background_suv, dtype=np.float64)
    mask = np.zeros(dims, dtype=np.float64)

    for blob, hu, suv in zip(geo.tumors, geo.tumor_hu, geo.tumor_suv):
        inside = blob.inside(zz, yy, xx)
        ct[inside] = hu
        pet[inside] = suv
        mask[inside] = 1.0
    for blob, suv in zip(geo.distractors, geo.distractor_suv):
        inside = blob.inside(zz, yy, xx)
        pet[inside] = suv  # bright in PET, invisible in CT, absent from mask

    # noise comes from the same stream, after all geometry/intensity draws
    rng = np.random.default_rng(spec.seed + (1 << 32))
    ct += rng.normal(0.0, 20.0 * spec.noise_level, size=dims)
    pet += rng.normal(0.0, 0.2 * spec.noise_level, size=dims)
    np.maximum(pet, 0.0, out=pet)  # SUV stays nonnegative

    if case_id is None:
        case_id = f"phantom{spec.seed:05d}"
    return Case(
        case_id,
        ct=Volume(ct, spec.spacing_mm, "CT"),
        pet=Volume(pet, spec.spacing_mm, "PET"),
        mask=Volume(mask, spec.spacing_mm, "MASK"),
    )


def distractor_region(spec):
    """Boolean mask of the distractor hot spots for this spec's seed."""
    geo = phantom_geometry(spec)
    return rasterize(geo.distractors, spec.dims)


def gen_dataset(spec, count, id_prefix="case"):
    """Generate ``count`` phantoms with consecutive seeds from spec.seed."""
    cases = []
    for i in range(count):
        s = replace(spec, seed=spec.seed + i)
        cases.append(gen_phantom(s, case_id=f"{id_prefix}{i:03d}"))
    return cases
