"""Volume bundles: an in-memory 3-D scalar field plus a tiny on-disk format.

A volume on disk is a pair of files sharing a stem: ``<name>.vol.json`` holds
the header (dims, spacing, modality, dtype, scan order) and ``<name>.vol.raw``
holds the payload as little-endian float32 in ``[z, y, x]`` scan order with x
fastest. The round trip is bit-exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, HeaderError, PayloadLengthError

MODALITIES = ("CT", "PET", "MASK")

_FORMAT = "petctseg-vol-v1"
_DTYPE = "f32le"
_ORDER = "zyx"


@dataclass
class Volume:
    """3-D scalar field with physical spacing and a modality tag.

    ``values`` is float32 with shape ``(D, H, W)``; ``spacing_mm`` is
    ``(sz, sy, sx)``. MASK volumes hold values in [0, 1] (binary masks, or
    soft labels after mixup).
    """

    values: np.ndarray
    spacing_mm: tuple
    modality: str

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise DimensionError("Volume values must be a 3-D array")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise DimensionError("spacing_mm must be three positive floats")
        if self.modality not in MODALITIES:
            raise DimensionError(
                f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.modality == "MASK":
            lo, hi = float(self.values.min(initial=0.0)), float(self.values.max(initial=0.0))
            if lo < 0.0 or hi > 1.0:
                raise DimensionError("MASK values must lie in [0, 1]")

    @property
    def dims(self):
        return self.values.shape

    def copy(self):
        return Volume(self.values.copy(), self.spacing_mm, self.modality)


@dataclass
class Case:
    """One subject: CT, PET and ground-truth mask sharing a grid."""

    case_id: str
    ct: Volume
    pet: Volume
    mask: Volume

    def volumes(self):
        return {"ct": self.ct, "pet": self.pet, "mask": self.mask}

    def aligned(self):
        dims = {v.dims for v in self.volumes().values()}
        spac = {v.spacing_mm for v in self.volumes().values()}
        return len(dims) == 1 and len(spac) == 1

    def copy(self):
        return Case(self.case_id, self.ct.copy(), self.pet.copy(), self.mask.copy())


def _stem(path):
    path = os.fspath(path)
    for suffix in (".vol.json", ".vol.raw"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def write_volume(volume, path):
    """Write ``<stem>.vol.json`` + ``<stem>.vol.raw``; whole-file writes."""
    stem = _stem(path)
    header = {
        "format": _FORMAT,
        "dims": list(volume.dims),
        "spacing_mm": list(volume.spacing_mm),
        "modality": volume.modality,
        "dtype": _DTYPE,
        "order": _ORDER,
    }
    with open(stem + ".vol.json", "w", encoding="utf-8") as fh:
        json.dump(header, fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(stem + ".vol.raw", "wb") as fh:
        fh.write(volume.values.astype("<f4", copy=False).tobytes())


def read_volume(path):
    """Read a volume bundle written by :func:`write_volume`.

    Raises FileNotFoundError for missing files, HeaderError for a malformed
    header and PayloadLengthError when the payload size disagrees with dims.
    """
    stem = _stem(path)
    header_path, raw_path = stem + ".vol.json", stem + ".vol.raw"
    with open(header_path, "r", encoding="utf-8") as fh:
        try:
            header = json.load(fh)
        except json.JSONDecodeError as exc:
            raise HeaderError(f"{header_path}: not valid JSON ({exc})") from exc

    for key in ("format", "dims", "spacing_mm", "modality", "dtype", "order"):
        if key not in header:
            raise HeaderError(f"{header_path}: missing field {key!r}")
    if header["format"] != _FORMAT:
        raise HeaderError(f"{header_path}: unknown format {header['format']!r}")
    if header["dtype"] != _DTYPE or header["order"] != _ORDER:
        raise HeaderError(f"{header_path}: unsupported dtype/order")
    dims = header["dims"]
    if (not isinstance(dims, list) or len(dims) != 3
            or any(not isinstance(d, int) or d <= 0 for d in dims)):
        raise HeaderError(f"{header_path}: dims must be three positive ints")
    if header["modality"] not in MODALITIES:
        raise HeaderError(f"{header_path}: bad modality {header['modality']!r}")
    spacing = header["spacing_mm"]
    if len(spacing) != 3 or any(float(s) <= 0 for s in spacing):
        raise HeaderError(f"{header_path}: spacing_mm must be positive")

    with open(raw_path, "rb") as fh:
        payload = fh.read()
    expected = dims[0] * dims[1] * dims[2] * 4
    if len(payload) != expected:
        raise PayloadLengthError(
            f"{raw_path}: expected {expected} bytes for dims {dims}, "
            f"got {len(payload)}")
    values = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return Volume(values.copy(), tuple(spacing), header["modality"])


def write_case(case, directory):
    """Write the three volumes of a case under ``directory/<case_id>/``."""
    case_dir = os.path.join(os.fspath(directory), case.case_id)
    os.makedirs(case_dir, exist_ok=True)
    for name, vol in case.volumes().items():
        write_volume(vol, os.path.join(case_dir, name))
    return case_dir


def read_case(directory, case_id):
    case_dir = os.path.join(os.fspath(directory), case_id)
    return Case(
        case_id,
        ct=read_volume(os.path.join(case_dir, "ct")),
        pet=read_volume(os.path.join(case_dir, "pet")),
        mask=read_volume(os.path.join(case_dir, "mask")),
    )


def list_case_ids(directory):
    """Case ids below a dataset directory, sorted for determinism."""
    root = os.fspath(directory)
    ids = [d for d in os.listdir(root)
           if os.path.isfile(os.path.join(root, d, "ct.vol.json"))]
    return sorted(ids)
