"""Rotate-then-predict vs predict-then-rotate comparison for a whole network."""

from __future__ import annotations

import numpy as np

from . import dihedral as dh
from .errors import ShapeError
from .net import Network

TOL_ABS_F64 = 1e-10
TOL_REL_F32 = 1e-4


def equivariance_rows(net: Network, x: np.ndarray) -> list[dict]:
    """One row per group element comparing the two prediction orders.

    x: [1, C, H, W] square input.  Uses train-mode batch statistics so the
    check is meaningful for untrained networks too.  Rows carry the max
    absolute logit discrepancy, the same relative to the logit magnitude,
    and the number of pixels whose argmax mask disagrees.
    """
    if x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"equivariance check needs square input, got {x.shape}")
    base = net.forward(x, train=True)
    scale = float(np.max(np.abs(base)))
    rows = []
    for g in dh.ELEMENTS:
        lhs = net.forward(dh.act_on_plane(g, x), train=True)
        rhs = dh.act_on_plane(g, base)
        diff = np.abs(lhs - rhs)
        max_abs = float(diff.max())
        mask_diff = int(np.sum(lhs.argmax(axis=1) != rhs.argmax(axis=1)))
        rows.append({
            "element": f"r{g.rot}m{g.mirror}",
            "max_abs": max_abs,
            "max_rel": max_abs / scale if scale > 0 else 0.0,
            "mask_diff_px": mask_diff,
            "diff_map": diff.max(axis=(0, 1)),
        })
    return rows


def passes_tolerance(rows: list[dict], dtype) -> bool:
    if np.dtype(dtype) == np.float64:
        return all(r["max_abs"] <= TOL_ABS_F64 for r in rows)
    return all(r["max_rel"] <= TOL_REL_F32 for r in rows)
