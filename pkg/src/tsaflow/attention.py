"""Occlusion-aware self-attention over 1/8-scale cells.

Feature maps are extended with channels derived from the occlusion
score map, so the attention head can tell trustworthy cells from
covered ones. The row-stochastic attention matrix rectifies the matched
flow (propagating it from reliable cells) and is trained under two
direct constraints: repulsion pulls predictions toward ground truth
after occluded cells' flow is zeroed out (referencing them then hurts),
attraction pulls each non-occluded row's expected grid coordinate back
to its own cell.
"""

from __future__ import annotations

import csv

import numpy as np

from . import tensor as tt
from .dataio import write_pgm
from .errors import DegenerateMaskError, DimensionError
from .tensor import Tensor


def normal_grid(h8: int, w8: int, dtype=np.float64) -> np.ndarray:
    """Cell coordinates [n,2] in row-major order: grid[i] = (i % w8, i // w8)."""
    idx = np.arange(h8 * w8)
    gy, gx = np.divmod(idx, w8)
    return np.stack([gx, gy], axis=1).astype(dtype)


class FeatureExtender:
    """Occlusion scores -> conv3x3 -> relu -> conv3x3, concatenated after the features."""

    def __init__(self, rng: np.random.Generator, om_channels: int = 16, dtype=np.float32):
        self.om_channels = om_channels

        def w(cout, cin):
            std = np.sqrt(2.0 / (cin * 9))
            return Tensor(rng.normal(0.0, std, size=(cout, cin, 3, 3)).astype(dtype), requires_grad=True)

        self._params = {
            "conv1.w": w(om_channels, 1),
            "conv1.b": Tensor(np.zeros(om_channels, dtype=dtype), requires_grad=True),
            "conv2.w": w(om_channels, om_channels),
            "conv2.b": Tensor(np.zeros(om_channels, dtype=dtype), requires_grad=True),
        }

    def params(self) -> dict[str, Tensor]:
        return dict(self._params)

    def __call__(self, features: Tensor, om: np.ndarray) -> Tensor:
        om = np.asarray(om)
        if om.shape != tuple(features.shape[1:]):
            raise DimensionError(f"extend: occlusion map {om.shape} does not match features {tuple(features.shape)}")
        p = self._params
        x = Tensor(om[None].astype(features.data.dtype))  # scores are a fixed input
        x = tt.relu(tt.conv2d(x, p["conv1.w"], p["conv1.b"], stride=1, padding=1))
        x = tt.conv2d(x, p["conv2.w"], p["conv2.b"], stride=1, padding=1)
        return tt.concat([features, x], axis=0)


class AttentionHead:
    """Query/key projections and a row-softmax; no value projection."""

    def __init__(self, rng: np.random.Generator, in_channels: int, dim: int = 64, dtype=np.float32):
        self.dim = dim
        bound = np.sqrt(6.0 / (in_channels + dim))
        self._params = {
            "wq": Tensor(rng.uniform(-bound, bound, size=(in_channels, dim)).astype(dtype), requires_grad=True),
            "wk": Tensor(rng.uniform(-bound, bound, size=(in_channels, dim)).astype(dtype), requires_grad=True),
        }

    def params(self) -> dict[str, Tensor]:
        return dict(self._params)

    def __call__(self, features: Tensor, temperature: float = 1.0) -> Tensor:
        c, h8, w8 = features.shape
        if c != self._params["wq"].shape[0]:
            raise DimensionError(f"attention: features have {c} channels, projections expect {self._params['wq'].shape[0]}")
        x = tt.transpose(tt.reshape(features, (c, h8 * w8)))  # [n, c]
        q = tt.matmul(x, self._params["wq"])
        k = tt.matmul(x, self._params["wk"])
        logits = tt.matmul(q, tt.transpose(k)) * float(1.0 / np.sqrt(self.dim))
        return tt.softmax_rows(logits, temperature)


def masked_flow(flow_gm: Tensor, om_n: np.ndarray) -> Tensor:
    """Zero the matched flow at occluded cells (om_n == 0), exactly."""
    om_n = np.asarray(om_n)
    if om_n.shape != tuple(flow_gm.shape[1:]):
        raise DimensionError(f"masked_flow: mask {om_n.shape} does not match flow {tuple(flow_gm.shape)}")
    return tt.mul(flow_gm, Tensor(om_n[None].astype(flow_gm.data.dtype)))


def rectify(m: Tensor, flow: Tensor) -> Tensor:
    """Propagate per-cell flow through the attention rows: out_i = sum_j m_ij flow_j."""
    two, h8, w8 = flow.shape
    n = h8 * w8
    if m.shape != (n, n):
        raise DimensionError(f"rectify: attention {tuple(m.shape)} does not match {n} cells")
    flat = tt.transpose(tt.reshape(flow, (two, n)))  # [n, 2]
    return tt.reshape(tt.transpose(tt.matmul(m, flat)), (two, h8, w8))


def repulsion_loss(rect: Tensor, flow_gt_ds) -> Tensor:
    """L1 between rectified and ground-truth flow over all cells.

    flow_gt_ds is the full-res ground truth average-pooled over 8x8
    blocks and divided by 8 (cell units). Every cell counts: a query
    spending mass on zeroed cells drags its prediction toward zero and
    pays here.
    """
    target = flow_gt_ds if isinstance(flow_gt_ds, Tensor) else Tensor(np.asarray(flow_gt_ds, dtype=rect.data.dtype))
    return tt.l1_loss(rect, target)


def attraction_loss(m: Tensor, om_n: np.ndarray, grid: np.ndarray) -> Tensor:
    """L1 between each non-occluded row's expected grid coordinate and its own.

    Rows are weighted uniformly; occluded rows are excluded. Raises
    DegenerateMaskError when om_n selects nothing.
    """
    om_n = np.asarray(om_n)
    if int(om_n.sum()) == 0:
        raise DegenerateMaskError("attraction_loss: no non-occluded rows")
    grid_t = Tensor(np.asarray(grid, dtype=m.data.dtype))
    expected = tt.matmul(m, grid_t)  # [n, 2]
    return tt.l1_loss(expected, grid_t, mask=om_n.reshape(-1, 1))


def dump_attention(prefix, m: np.ndarray, query: tuple[int, int], h8: int, w8: int) -> tuple[str, str]:
    """Write one query's attention row as 16-bit PGM + (x, y, weight) CSV.

    query is (x, y) in cell coordinates; returns (pgm_path, csv_path).
    """
    qx, qy = query
    if not (0 <= qx < w8 and 0 <= qy < h8):
        raise DimensionError(f"query cell {query} outside {w8}x{h8} grid")
    row = np.asarray(m)[qy * w8 + qx].reshape(h8, w8)
    pgm_path = f"{prefix}.pgm"
    csv_path = f"{prefix}.csv"
    write_pgm(pgm_path, row)
    with open(csv_path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["cell_x", "cell_y", "weight"])
        for i, wt in enumerate(row.ravel()):
            wr.writerow([i % w8, i // w8, f"{wt:.10g}"])
    return pgm_path, csv_path
