"""Occlusion scoring by forward-backward flow consistency.

A cell's score is the norm of (forward flow + backward flow sampled at
the forward target): near zero where both frames see the same surface,
large where the target shows something else. Cells whose warp target
leaves the field get the in-bounds maximum plus one, so they always
rank as occluded. Scores are plain arrays: nothing here participates in
gradients.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tt
from .dataio import write_pgm
from .errors import DimensionError
from .tensor import Tensor

# score threshold separating non-occluded cells, in cell units
NON_OCCLUDED_BELOW = 0.125


def _as_array(flow) -> np.ndarray:
    return np.asarray(flow.data if isinstance(flow, Tensor) else flow, dtype=np.float64)


def estimate_occlusion(flow_fwd, flow_bwd) -> np.ndarray:
    """Per-cell occlusion score from bidirectional 1/8-scale flows."""
    fwd = _as_array(flow_fwd)
    bwd = _as_array(flow_bwd)
    if fwd.ndim != 3 or fwd.shape[0] != 2 or fwd.shape != bwd.shape:
        raise DimensionError(f"estimate_occlusion: want matching [2,h,w] flows, got {fwd.shape} and {bwd.shape}")
    h, w = fwd.shape[1:]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([xs + fwd[0], ys + fwd[1]])
    with tt.no_grad():
        sampled, valid = tt.bilinear_sample(Tensor(bwd), Tensor(coords))
    om = np.sqrt(((fwd + sampled.data) ** 2).sum(axis=0))
    if not valid.all():
        # out-of-frame targets outrank every observed score
        om[~valid] = (om[valid].max() + 1.0) if valid.any() else 1.0
    return om


def non_occluded_mask(om: np.ndarray) -> np.ndarray:
    """1 where the score is strictly below 1/8; the boundary counts as occluded."""
    return (np.asarray(om) < NON_OCCLUDED_BELOW).astype(np.uint8)


def dump_occlusion(path, om: np.ndarray):
    """Normalized 16-bit PGM of the score map, for eyeballing."""
    write_pgm(path, np.asarray(om, dtype=np.float64))
