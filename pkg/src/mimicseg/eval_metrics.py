"""Overlap and boundary-distance metrics for binary 2D masks.

Conventions for empty masks (not universal, so they are recorded in every
report): both-empty slices score DSC = IoU = 1 and distances (0, 0); a slice
where exactly one mask is empty has undefined distances, which are left out
of the averages and counted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ShapeError

CONVENTIONS = {
    "both_empty_dsc": 1.0,
    "both_empty_iou": 1.0,
    "both_empty_distances": (0.0, 0.0),
    "one_empty_distances": "undefined, excluded and counted",
    "percentile_method": "linear",
    "boundary": "mask minus 4-connected erosion",
}

_CROSS = ndimage.generate_binary_structure(2, 1)


def _pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    return pred, gt


def dsc(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    total = pred.sum() + gt.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / total)


def _iou(a, b):
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def miou(pred, gt) -> float:
    """Mean IoU over background and lesion."""
    pred, gt = _pair(pred, gt)
    return 0.5 * (_iou(~pred, ~gt) + _iou(pred, gt))


def boundary(mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def directed_distances(src, dst, spacing=(1.0, 1.0)) -> np.ndarray:
    """Distance from every boundary pixel of ``src`` to the nearest boundary pixel of ``dst``."""
    b_src, b_dst = boundary(src), boundary(dst)
    edt = ndimage.distance_transform_edt(~b_dst, sampling=spacing)
    return edt[b_src]


def surface_distances(pred, gt, spacing=(1.0, 1.0)):
    """(HD95, ASD) over the combined symmetric boundary distances.

    Returns ``(nan, nan)`` when exactly one mask is empty.
    """
    pred, gt = _pair(pred, gt)
    spacing = tuple(float(s) for s in spacing)
    has_p, has_g = pred.any(), gt.any()
    if not has_p and not has_g:
        return 0.0, 0.0
    if has_p != has_g:
        return math.nan, math.nan
    d = np.concatenate([directed_distances(pred, gt, spacing), directed_distances(gt, pred, spacing)])
    return float(np.percentile(d, 95, method="linear")), float(d.mean())


@dataclass
class MetricReport:
    dsc: float
    miou: float
    hd95: float
    asd: float
    per_slice: list = field(default_factory=list)
    undefined_distance_count: int = 0
    conventions: dict = field(default_factory=lambda: dict(CONVENTIONS))

    def summary_row(self, method="U-Net+MIMIC"):
        """Table-style row: DSC and mIoU in percent, distances in pixel/mm units."""
        return {
            "Methods": method,
            "DSC": round(100 * self.dsc, 2),
            "mIoU": round(100 * self.miou, 2),
            "HD95": round(self.hd95, 2),
            "ASD": round(self.asd, 2),
        }


def slice_metrics(pred, gt, spacing=(1.0, 1.0)) -> dict:
    hd95, asd = surface_distances(pred, gt, spacing)
    return {"dsc": dsc(pred, gt), "miou": miou(pred, gt), "hd95": hd95, "asd": asd}


def aggregate(rows) -> MetricReport:
    """Mean of per-slice metrics; undefined distances are excluded and counted."""
    if not rows:
        return MetricReport(math.nan, math.nan, math.nan, math.nan)
    hd = np.array([r["hd95"] for r in rows], dtype=np.float64)
    asd = np.array([r["asd"] for r in rows], dtype=np.float64)
    defined = ~np.isnan(hd)
    return MetricReport(
        dsc=float(np.mean([r["dsc"] for r in rows])),
        miou=float(np.mean([r["miou"] for r in rows])),
        hd95=float(hd[defined].mean()) if defined.any() else math.nan,
        asd=float(asd[defined].mean()) if defined.any() else math.nan,
        per_slice=list(rows),
        undefined_distance_count=int((~defined).sum()),
    )
