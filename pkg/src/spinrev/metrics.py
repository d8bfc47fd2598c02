"""Raster and spin-map comparison metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, ValidationError

logger = logging.getLogger(__name__)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b) -> float:
    """Root-mean-square difference of two equally shaped rasters."""
    a, b = _pair(a, b)
    if a.size == 0:
        raise ValidationError("rmse of empty rasters is undefined")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(a, b) -> float:
    """Peak SNR in dB with peak ``max|a|``; identical rasters give ``inf``."""
    a, b = _pair(a, b)
    err = rmse(a, b)
    if err == 0.0:
        return math.inf
    peak = float(np.max(np.abs(a)))
    if peak == 0.0:
        return -math.inf
    return 20.0 * math.log10(peak / err)


@dataclass(frozen=True)
class ClassRow:
    label: int
    count: int
    mean: tuple
    median: tuple
    std: tuple


def class_stats(z, labels=None) -> dict:
    """Per-class mean/median/std of (pd, t1, t2), keyed by integer label.

    Classes listed in ``labels`` but absent from it are skipped with a
    warning; ``labels`` defaults to ``z.labels``.
    """
    labels = z.labels if labels is None else np.asarray(labels)
    if labels is None:
        raise ValidationError("class_stats needs a label raster")
    if labels.shape != z.pd.shape:
        raise DimensionMismatchError(f"labels {labels.shape} do not cover raster {z.pd.shape}")
    stack = z.stack()
    out = {}
    for lab in np.unique(labels):
        vals = stack[labels == lab]
        # shifted mean: exact for constant classes
        mean = vals[0] + (vals - vals[0]).mean(axis=0)
        out[int(lab)] = ClassRow(
            int(lab), len(vals),
            tuple(float(v) for v in mean),
            tuple(float(v) for v in np.median(vals, axis=0)),
            tuple(float(v) for v in np.sqrt(np.mean((vals - mean) ** 2, axis=0))),
        )
    return out


def class_stats_for(z, classes, labels=None) -> tuple[dict, list]:
    """:func:`class_stats` restricted to ``classes``; returns ``(rows, empty)``."""
    rows = class_stats(z, labels)
    empty = [int(c) for c in classes if int(c) not in rows]
    for c in empty:
        logger.warning("class %d has no voxels; excluded", c)
    return {int(c): rows[int(c)] for c in classes if int(c) in rows}, empty


# channel index per property
_CH = {"pd": 0, "t1": 1, "t2": 2}


def ordering_checks(z, labels=None, stat: str = "median") -> dict:
    """Tissue ordering booleans used by the round-trip checks.

    Returns keys ``t1_blood_gt_myo``, ``t1_myo_gt_fat``, ``t2_blood_gt_fat``
    and ``t2_fat_gt_myo`` (labels 1 blood, 2 myocardium, 3 fat).
    """
    rows, empty = class_stats_for(z, (1, 2, 3), labels)
    if empty:
        return {k: False for k in ("t1_blood_gt_myo", "t1_myo_gt_fat", "t2_blood_gt_fat", "t2_fat_gt_myo")}
    v = lambda lab, prop: getattr(rows[lab], stat)[_CH[prop]]
    return {
        "t1_blood_gt_myo": v(1, "t1") > v(2, "t1"),
        "t1_myo_gt_fat": v(2, "t1") > v(3, "t1"),
        "t2_blood_gt_fat": v(1, "t2") > v(3, "t2"),
        "t2_fat_gt_myo": v(3, "t2") > v(2, "t2"),
    }


def median_relative_error(est, ref, mask=None) -> float:
    """Median of ``|est - ref| / |ref|`` over ``mask`` (default: ``ref != 0``)."""
    est, ref = _pair(est, ref)
    mask = ref != 0 if mask is None else np.asarray(mask, dtype=bool) & (ref != 0)
    if not mask.any():
        raise ValidationError("no voxels to compare")
    return float(np.median(np.abs(est[mask] - ref[mask]) / np.abs(ref[mask])))
