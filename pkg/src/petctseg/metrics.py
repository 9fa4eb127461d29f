"""Segmentation quality metrics on binary masks.

Overlap metrics come from the voxel confusion counts; boundary metrics use
Euclidean distances between voxel centers in millimeters. Distances run
through one of two interchangeable engines: exhaustive all-pairs for small
sets, an exact Euclidean distance map above ``ALL_PAIRS_LIMIT`` points. Both
produce identical results; the unit tests hold them to each other.

Empty-mask conventions: metrics needing a nonempty set raise
UndefinedMetricError (reported as NaN plus a flag by ``evaluate_case``);
recall is 1 when there are no positives to find and precision is 1 when
nothing was predicted. When both masks are empty the overlap metrics read as
a perfect match (DSC 1, VOE 0, RVD 0).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionError, UndefinedMetricError, UsageError

ALL_PAIRS_LIMIT = 10_000

_CSV_COLUMNS = ("case_id", "dsc", "hd_mm", "assd_mm", "voe", "rvd",
                "recall", "precision")


@dataclass(frozen=True)
class MetricsReport:
    """Per-case metric values; undefined entries are NaN and listed in
    ``undefined`` together with the reason."""

    case_id: str
    dsc: float
    hd_mm: float
    assd_mm: float
    voe: float
    rvd: float
    recall: float
    precision: float
    undefined: tuple = ()


def _as_binary(mask, name):
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    uniq = np.unique(arr)
    if not np.all(np.isin(uniq, (0.0, 1.0))):
        raise UsageError(f"{name} mask must be binary, found values {uniq[:5]}")
    return arr != 0


def confusion(pred_mask, true_mask):
    """Voxel counts (TP, FP, FN, TN) for two binary masks."""
    pred = _as_binary(pred_mask, "pred")
    true = _as_binary(true_mask, "true")
    if pred.shape != true.shape:
        raise DimensionError(
            f"mask shapes disagree: {pred.shape} vs {true.shape}")
    tp = int(np.count_nonzero(pred & true))
    fp = int(np.count_nonzero(pred & ~true))
    fn = int(np.count_nonzero(~pred & true))
    tn = pred.size - tp - fp - fn
    return tp, fp, fn, tn


def overlap_metrics(pred_mask, true_mask):
    """DSC, VOE, RVD, recall and precision from shared confusion counts."""
    tp, fp, fn, _ = confusion(pred_mask, true_mask)
    union = tp + fp + fn
    dsc = 1.0 if union == 0 else 2.0 * tp / (2.0 * tp + fp + fn)
    voe = 0.0 if union == 0 else 1.0 - tp / union
    n_pred, n_true = tp + fp, tp + fn
    if n_true > 0:
        rvd = (n_pred - n_true) / n_true
    elif n_pred == 0:
        rvd = 0.0
    else:
        rvd = math.nan  # no reference volume to compare against
    recall = 1.0 if n_true == 0 else tp / n_true
    precision = 1.0 if n_pred == 0 else tp / n_pred
    return {"dsc": dsc, "voe": voe, "rvd": rvd, "recall": recall,
            "precision": precision}


def extract_surface(mask):
    """Foreground voxels with a face-adjacent (6-connected) background
    neighbor; the volume boundary counts as background."""
    m = _as_binary(mask, "mask")
    padded = np.pad(m, 1, constant_values=False)
    all_neighbors = np.ones_like(m)
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        all_neighbors &= padded[tuple(lo)] & padded[tuple(hi)]
    return m & ~all_neighbors


def _points_mm(mask, spacing_mm):
    return np.argwhere(mask).astype(np.float64) * np.asarray(spacing_mm)


def _min_dists_all_pairs(pa, pb, chunk=512):
    out = np.empty(len(pa))
    for i in range(0, len(pa), chunk):
        diff = pa[i:i + chunk, None, :] - pb[None, :, :]
        out[i:i + chunk] = np.sqrt((diff * diff).sum(axis=-1)).min(axis=1)
    return out


def _distance_map(mask, spacing_mm):
    """Exact Euclidean distance (mm) from every voxel to the mask."""
    return ndimage.distance_transform_edt(~mask, sampling=spacing_mm)


def _directed_dists(src_mask, dst_mask, spacing_mm, use_map):
    """Min distance from every src voxel to the dst set, in millimeters."""
    if use_map:
        return _distance_map(dst_mask, spacing_mm)[src_mask]
    return _min_dists_all_pairs(_points_mm(src_mask, spacing_mm),
                                _points_mm(dst_mask, spacing_mm))


def _check_nonempty(pred, true, metric):
    sides = []
    if not pred.any():
        sides.append("pred")
    if not true.any():
        sides.append("true")
    if sides:
        side = "both" if len(sides) == 2 else sides[0]
        raise UndefinedMetricError(
            f"{metric} undefined: empty {side} mask", empty_side=side)


def hausdorff(pred_mask, true_mask, spacing_mm):
    """Symmetric Hausdorff distance over all foreground voxels, millimeters."""
    pred = _as_binary(pred_mask, "pred")
    true = _as_binary(true_mask, "true")
    if pred.shape != true.shape:
        raise DimensionError("mask shapes disagree")
    _check_nonempty(pred, true, "hausdorff")
    use_map = max(pred.sum(), true.sum()) > ALL_PAIRS_LIMIT
    forward = _directed_dists(pred, true, spacing_mm, use_map).max()
    backward = _directed_dists(true, pred, spacing_mm, use_map).max()
    return float(max(forward, backward))


def assd(pred_mask, true_mask, spacing_mm):
    """Average symmetric surface distance in millimeters.

    Directed means run over surface voxels only; the two directions are
    averaged.
    """
    pred = _as_binary(pred_mask, "pred")
    true = _as_binary(true_mask, "true")
    if pred.shape != true.shape:
        raise DimensionError("mask shapes disagree")
    _check_nonempty(pred, true, "assd")
    surf_pred = extract_surface(pred)
    surf_true = extract_surface(true)
    use_map = max(surf_pred.sum(), surf_true.sum()) > ALL_PAIRS_LIMIT
    forward = _directed_dists(surf_pred, surf_true, spacing_mm, use_map).mean()
    backward = _directed_dists(surf_true, surf_pred, spacing_mm, use_map).mean()
    return float(0.5 * (forward + backward))


def binarize(values, threshold, inclusive=True):
    """Threshold a float array to a binary float mask."""
    if inclusive:
        return (np.asarray(values) >= threshold).astype(np.float32)
    return (np.asarray(values) > threshold).astype(np.float32)


def suv_threshold_mask(pet_volume, threshold=2.5):
    """The classic hot-spot baseline: everything above the SUV cut is tumor."""
    return binarize(pet_volume.values, threshold, inclusive=False)


def evaluate_case(pred_prob, true_mask, threshold=0.5, case_id=""):
    """All seven metrics for one case.

    ``pred_prob`` is a probability Volume (binarized at ``threshold``, >=)
    and ``true_mask`` a binary Volume. Distance metrics that are undefined
    for empty masks come back as NaN with a flag instead of raising.
    """
    if pred_prob.dims != true_mask.dims or \
            pred_prob.spacing_mm != true_mask.spacing_mm:
        raise DimensionError("prediction and truth must share the grid")
    pred = binarize(pred_prob.values, threshold)
    true = true_mask.values
    numbers = overlap_metrics(pred, true)
    undefined = []
    if math.isnan(numbers["rvd"]):
        undefined.append("rvd: empty true mask")
    try:
        hd = hausdorff(pred, true, pred_prob.spacing_mm)
    except UndefinedMetricError as exc:
        hd = math.nan
        undefined.append(f"hd_mm: empty {exc.empty_side} mask")
    try:
        sd = assd(pred, true, pred_prob.spacing_mm)
    except UndefinedMetricError as exc:
        sd = math.nan
        undefined.append(f"assd_mm: empty {exc.empty_side} mask")
    return MetricsReport(case_id=case_id,
                         dsc=numbers["dsc"], hd_mm=hd, assd_mm=sd,
                         voe=numbers["voe"], rvd=numbers["rvd"],
                         recall=numbers["recall"],
                         precision=numbers["precision"],
                         undefined=tuple(undefined))


def mean_report(reports):
    """Aggregate row: NaN-skipping means, with RVD averaged as |RVD|."""
    def agg(name, values):
        vals = np.asarray(values, dtype=np.float64)
        if name == "rvd":
            vals = np.abs(vals)
        defined = vals[~np.isnan(vals)]
        return float(defined.mean()) if defined.size else math.nan

    return MetricsReport(
        case_id="MEAN",
        **{name: agg(name, [getattr(r, name) for r in reports])
           for name in ("dsc", "hd_mm", "assd_mm", "voe", "rvd", "recall",
                        "precision")},
    )


def write_report_csv(reports, path):
    """Per-case rows sorted by case id plus a MEAN row; NaN spelled ``nan``.

    Floats are written with ``repr`` so values survive the round trip
    bit-exactly.
    """
    rows = sorted(reports, key=lambda r: r.case_id)
    rows.append(mean_report(rows))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_COLUMNS)
        for r in rows:
            writer.writerow([r.case_id] + [repr(getattr(r, c))
                                           for c in _CSV_COLUMNS[1:]])


def read_report_csv(path):
    """Rows of a report CSV as MetricsReport objects (MEAN row included)."""
    out = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != _CSV_COLUMNS:
            raise UsageError(f"unexpected report header {header}")
        for row in reader:
            values = {c: float(v) for c, v in zip(_CSV_COLUMNS[1:], row[1:])}
            out.append(MetricsReport(case_id=row[0], **values))
    return out
