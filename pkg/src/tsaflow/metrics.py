"""Evaluation metrics: attention quality at cell resolution, endpoint error at pixel resolution.

Cell-level occlusion labels come from the pixel ground truth by block
averaging. A cell is quasi-occluded when its 8x8 block mean exceeds 0.5
(strictly; exactly 0.5 is committed to neither side) and confirmed when
every in-bounds 4-neighbor is quasi on the same side. Confirmed cells
are the only ones the attention metrics trust as query sets; border-of-
motion cells with mixed labels stay out of both.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .errors import DimensionError, UndefinedMetricError

CELL = 8


@dataclass
class OccCells:
    """Cell-resolution occlusion labels, all [h8, w8] uint8."""

    occ: np.ndarray        # confirmed occluded
    non_occ: np.ndarray    # confirmed non-occluded
    quasi_occ: np.ndarray
    quasi_non: np.ndarray


def _confirmed(quasi: np.ndarray) -> np.ndarray:
    ok = quasi.astype(bool).copy()
    h8, w8 = quasi.shape
    q = quasi.astype(bool)
    ok[1:, :] &= q[:-1, :]
    ok[:-1, :] &= q[1:, :]
    ok[:, 1:] &= q[:, :-1]
    ok[:, :-1] &= q[:, 1:]
    return ok.astype(np.uint8)


def downsample_occ_gt(occ_gt: np.ndarray) -> OccCells:
    """Pixel occlusion map [H, W] to confirmed/quasi cell labels."""
    h, w = occ_gt.shape
    if h % CELL or w % CELL:
        raise DimensionError(f"occlusion map {h}x{w} not a multiple of {CELL}")
    bm = occ_gt.astype(np.float64).reshape(h // CELL, CELL, w // CELL, CELL).mean(axis=(1, 3))
    quasi_occ = (bm > 0.5).astype(np.uint8)
    quasi_non = (bm < 0.5).astype(np.uint8)
    return OccCells(
        occ=_confirmed(quasi_occ),
        non_occ=_confirmed(quasi_non),
        quasi_occ=quasi_occ,
        quasi_non=quasi_non,
    )


def _query_rows(m: np.ndarray, query_mask: np.ndarray) -> np.ndarray:
    n = query_mask.size
    if m.shape != (n, n):
        raise DimensionError(f"attention {m.shape} does not match {query_mask.shape} cells")
    q = query_mask.reshape(-1).astype(bool)
    if not q.any():
        raise UndefinedMetricError("empty query set")
    return m[q]


def moa(m: np.ndarray, occ_side_mask: np.ndarray, query_mask: np.ndarray) -> float:
    """Mean attention mass (percent) that query rows place on occ_side_mask cells.

    Row-stochastic rows partition their mass, so for any query the masses on
    occluded, non-occluded, and unconfirmed cells add to 100. Reporting uses
    the mass-on-occluded direction for both query populations.
    """
    rows = _query_rows(m, query_mask)
    cols = occ_side_mask.reshape(-1).astype(bool)
    return float(rows[:, cols].sum(axis=1).mean() * 100.0)


def mrd(m: np.ndarray, om_n: np.ndarray, grid: np.ndarray) -> float:
    """Attention-weighted mean grid distance from each non-occluded cell to where it looks.

    Units are cells. Zero exactly when every queried row is one-hot at itself.
    """
    rows = _query_rows(m, om_n)
    q = om_n.reshape(-1).astype(bool)
    d = np.linalg.norm(grid[q][:, None, :] - grid[None, :, :], axis=2)
    return float((rows * d).sum(axis=1).mean())


def mma(m: np.ndarray, mask: np.ndarray) -> float:
    """Mean of per-row peak attention over masked query rows, in percent."""
    rows = _query_rows(m, mask)
    return float(rows.max(axis=1).mean() * 100.0)


def endpoint_error(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    if pred.shape != gt.shape:
        raise DimensionError(f"flow shapes differ: {pred.shape} vs {gt.shape}")
    return np.linalg.norm(pred.astype(np.float64) - gt.astype(np.float64), axis=0)


def aepe_partitioned(
    pred: np.ndarray,
    gt: np.ndarray,
    occ_gt: np.ndarray,
    occ_in: np.ndarray,
    occ_out: np.ndarray,
) -> dict[str, Optional[float]]:
    """Mean endpoint error over all / non-occluded / occluded (and the in/out split).

    An empty partition yields None rather than a fake number.
    """
    epe = endpoint_error(pred, gt)
    occ = occ_gt.astype(bool)
    parts = {
        "aepe_all": np.ones_like(occ),
        "aepe_noc": ~occ,
        "aepe_occ": occ,
        "aepe_occ_in": occ_in.astype(bool),
        "aepe_occ_out": occ_out.astype(bool),
    }
    return {k: (float(epe[sel].mean()) if sel.any() else None) for k, sel in parts.items()}


@dataclass
class MetricsRecord:
    """Per-image evaluation row. None marks a metric undefined on that image."""

    index: int = 0
    moa_noc: Optional[float] = None
    moa_occ: Optional[float] = None
    mrd_noc: Optional[float] = None
    mma_noc: Optional[float] = None
    mma_occ: Optional[float] = None
    aepe_all: Optional[float] = None
    aepe_noc: Optional[float] = None
    aepe_occ: Optional[float] = None
    aepe_occ_in: Optional[float] = None
    aepe_occ_out: Optional[float] = None

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def aggregate(records: list, keys: Optional[list[str]] = None) -> dict[str, Optional[float]]:
    """Per-key lower median over records, skipping None entries.

    For even counts this takes the lower of the two central values, so the
    aggregate is always a value that actually occurred.
    """
    rows = [r.as_dict() if isinstance(r, MetricsRecord) else dict(r) for r in records]
    if keys is None:
        seen: dict[str, None] = {}
        for r in rows:
            for k in r:
                if k != "index":
                    seen[k] = None
        keys = list(seen)
    out: dict[str, Optional[float]] = {}
    for k in keys:
        vals = sorted(r[k] for r in rows if r.get(k) is not None)
        out[k] = vals[(len(vals) - 1) // 2] if vals else None
    return out


def write_metrics_csv(path, rows: list[dict]) -> None:
    """One row per image; '' stands for undefined."""
    if not rows:
        raise UndefinedMetricError("no rows to write")
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for r in rows:
            wr.writerow(["" if r.get(c) is None else r.get(c) for c in cols])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        rows = []
        for raw in rd:
            row = {}
            for k, v in raw.items():
                if v == "" or v is None:
                    row[k] = None
                else:
                    try:
                        row[k] = float(v)
                    except ValueError:
                        row[k] = v
            rows.append(row)
    return rows
