"""Binary-mask segmentation metrics: overlap ratios and Hausdorff distance.

Undefined ratios (0/0) follow common benchmark conventions and surface as
None so aggregation can exclude them: two empty masks count as a perfect
overlap (dice = jaccard = 1) with distance undefined; precision is
undefined when nothing was predicted, specificity when the ground truth
has no background.  Hausdorff is computed exactly from integer squared
distances between foreground pixel sets.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ShapeError


@dataclass
class MetricReport:
    dice: float | None
    jaccard: float | None
    precision: float | None
    specificity: float | None
    f1: float | None
    hausdorff: float | None
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def _as_mask(m) -> np.ndarray:
    a = np.asarray(m)
    if a.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {a.shape}")
    if a.dtype != bool:
        vals = np.unique(a)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError(f"mask values must be 0/1, found {vals[:5]}")
        a = a.astype(bool)
    return a


def _ratios(tp: int, fp: int, tn: int, fn: int) -> dict:
    dice = 1.0 if tp + fp + fn == 0 else 2.0 * tp / (2 * tp + fp + fn)
    jaccard = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
    precision = None if tp + fp == 0 else tp / (tp + fp)
    specificity = None if tn + fp == 0 else tn / (tn + fp)
    return {"dice": dice, "jaccard": jaccard, "precision": precision,
            "specificity": specificity, "f1": dice}


def overlap_metrics(pred, gt) -> MetricReport:
    """All count-based metrics; per case F1 coincides with Dice on binary masks."""
    p, g = _as_mask(pred), _as_mask(gt)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    tn = int(p.size - tp - fp - fn)
    r = _ratios(tp, fp, tn, fn)
    return MetricReport(hausdorff=None, tp=tp, fp=fp, tn=tn, fn=fn, **r)


def _directed_max_min_sqdist(a: np.ndarray, b: np.ndarray) -> int:
    """max over points of `a` of the min squared distance to `b`; exact integers."""
    worst = 0
    chunk = max(1, (1 << 20) // max(1, len(b)))
    for lo in range(0, len(a), chunk):
        part = a[lo : lo + chunk]
        d = part[:, None, :] - b[None, :, :]
        sq = (d * d).sum(axis=2).min(axis=1)
        worst = max(worst, int(sq.max()))
    return worst


def hausdorff(pred, gt) -> float | None:
    """Symmetric Hausdorff distance between foreground pixel sets, in pixels.

    Returns None when either mask is empty (distance undefined, never a crash).
    """
    p, g = _as_mask(pred), _as_mask(gt)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    a = np.argwhere(p).astype(np.int64)
    b = np.argwhere(g).astype(np.int64)
    if len(a) == 0 or len(b) == 0:
        return None
    sq = max(_directed_max_min_sqdist(a, b), _directed_max_min_sqdist(b, a))
    return float(np.sqrt(sq))


def evaluate_pair(pred, gt) -> MetricReport:
    report = overlap_metrics(pred, gt)
    report.hausdorff = hausdorff(pred, gt)
    return report


RATIO_KEYS = ("dice", "jaccard", "precision", "specificity", "f1")


def dataset_aggregate(reports: list[MetricReport]) -> dict:
    """Macro (mean of defined per-case values) and micro (pooled counts) summaries."""
    macro = {}
    for key in RATIO_KEYS + ("hausdorff",):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        macro[key] = float(np.mean(vals)) if vals else None
    tp = sum(r.tp for r in reports)
    fp = sum(r.fp for r in reports)
    tn = sum(r.tn for r in reports)
    fn = sum(r.fn for r in reports)
    micro = _ratios(tp, fp, tn, fn) if reports else {k: None for k in RATIO_KEYS}
    micro["hausdorff"] = None  # no pooled-count analogue
    return {"n_cases": len(reports), "macro": macro, "micro": micro}
