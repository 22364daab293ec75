"""Feature encoding and global matching at 1/8 resolution.

The encoder runs two branches and concatenates them: three stride-2
conv+relu blocks (4x4 kernels halve exactly) for cross-cell context,
and a single 8x8 stride-8 linear projection that gives every cell a
fingerprint of exactly its own pixels. A per-cell channel normalization
on the way out maps [3,H,W] frames to [C,H/8,W/8] features whose dot
products behave like cosine similarities. Matching correlates every
source cell with every target cell, row-softmaxes, and reads flow as
the expected target coordinate minus the source coordinate, so the
estimate is bounded by the grid extent. The backward direction is the
same routine with swapped arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .attention import normal_grid
from .errors import DimensionError, ParameterError, ShapeError
from .tensor import Tensor


@dataclass
class GlobalMatch:
    flow: Tensor  # [2,h8,w8], cell units
    correlation: Tensor  # [n,n], scaled by 1/sqrt(C), pre-softmax
    confidence: np.ndarray  # [h8,w8], row-softmax max


def _conv_init(rng, cout, cin, kh, kw, dtype):
    std = np.sqrt(2.0 / (cin * kh * kw))
    return rng.normal(0.0, std, size=(cout, cin, kh, kw)).astype(dtype)


class Encoder:
    """Conv pyramid for context plus a linear per-cell patch projection.

    Channel budget splits between the branches; the conv chain widths
    ramp relative to its own share.
    """

    def __init__(self, rng: np.random.Generator, out_channels: int = 64, in_channels: int = 3, dtype=np.float32):
        if out_channels < 2:
            raise ParameterError(f"encoder needs out_channels >= 2 to hold both branches, got {out_channels}")
        self.patch_channels = out_channels // 2
        conv_c = out_channels - self.patch_channels
        w1c = max(8, conv_c // 2)
        w2c = max(8, (3 * conv_c) // 4)
        self.widths = (w1c, w2c, conv_c)
        self.out_channels = out_channels
        chain = [(w1c, in_channels), (w2c, w1c), (conv_c, w2c)]
        self._params = {}
        for i, (co, ci) in enumerate(chain, start=1):
            self._params[f"conv{i}.w"] = Tensor(_conv_init(rng, co, ci, 4, 4, dtype), requires_grad=True)
            self._params[f"conv{i}.b"] = Tensor(np.zeros(co, dtype=dtype), requires_grad=True)
        # linear branch: no relu, so signed texture detail survives intact
        std = np.sqrt(1.0 / (in_channels * 64))
        self._params["patch.w"] = Tensor(
            rng.normal(0.0, std, size=(self.patch_channels, in_channels, 8, 8)).astype(dtype), requires_grad=True
        )
        self._params["patch.b"] = Tensor(np.zeros(self.patch_channels, dtype=dtype), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return dict(self._params)

    def __call__(self, frame: np.ndarray | Tensor) -> Tensor:
        data = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
        if data.ndim != 3 or data.shape[0] != 3:
            raise DimensionError(f"encoder expects [3,H,W], got {data.shape}")
        if data.shape[1] % 8 or data.shape[2] % 8:
            raise ShapeError(f"frame size {data.shape[1]}x{data.shape[2]} is not a multiple of 8")
        p = self._params
        dtype = p["conv1.w"].data.dtype
        x = Tensor(data.astype(dtype) * 2.0 - 1.0)  # [0,1] -> [-1,1]
        y = x
        for i in (1, 2, 3):
            y = tt.relu(tt.conv2d(y, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=2, padding=1))
        z = tt.conv2d(x, p["patch.w"], p["patch.b"], stride=8, padding=0)
        # per-cell normalization so correlation compares content, not the
        # shared post-relu activation mean
        return tt.normalize_cells(tt.concat([y, z], axis=0))


def global_match(f0: Tensor, f1: Tensor, temperature: float = 1.0) -> GlobalMatch:
    """Soft correspondence of every f0 cell against every f1 cell."""
    if f0.shape != f1.shape:
        raise DimensionError(f"global_match: feature shapes differ, {tuple(f0.shape)} vs {tuple(f1.shape)}")
    c, h8, w8 = f0.shape
    n = h8 * w8
    x0 = tt.transpose(tt.reshape(f0, (c, n)))  # [n, c]
    x1 = tt.transpose(tt.reshape(f1, (c, n)))
    corr = tt.matmul(x0, tt.transpose(x1)) * float(1.0 / np.sqrt(c))
    m = tt.softmax_rows(corr, temperature)
    grid = normal_grid(h8, w8, dtype=f0.data.dtype)
    expected = tt.matmul(m, Tensor(grid))  # [n, 2]
    flow = tt.reshape(tt.transpose(expected - Tensor(grid)), (2, h8, w8))
    confidence = m.data.max(axis=1).reshape(h8, w8)
    return GlobalMatch(flow=flow, correlation=corr, confidence=confidence)


def argmax_displacement(correlation: np.ndarray, h8: int, w8: int) -> np.ndarray:
    """Hard-argmax displacement [2,h8,w8] from a raw correlation matrix."""
    idx = np.asarray(correlation).argmax(axis=1)
    gy, gx = np.divmod(np.arange(h8 * w8), w8)
    ty, tx = np.divmod(idx, w8)
    return np.stack([(tx - gx).reshape(h8, w8), (ty - gy).reshape(h8, w8)]).astype(np.float64)
