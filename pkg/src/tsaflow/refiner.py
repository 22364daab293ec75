"""Iterative flow refinement at 1/8 resolution.

Each iteration looks up a window of the correlation volume around the
current flow target, encodes it with the flow into motion features,
aggregates those features globally through the attention matrix, and
feeds context + motion + aggregate into a gated recurrent cell whose
hidden state decodes a flow delta. The running flow estimate is cut
from the gradient graph at the top of every iteration; only the deltas
and the hidden chain carry training signal.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tt
from .errors import DimensionError, ParameterError
from .tensor import Tensor


def _conv(rng, cout, cin, k, dtype, gain=2.0):
    std = np.sqrt(gain / (cin * k * k))
    return Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)).astype(dtype), requires_grad=True)


def _bias(cout, dtype):
    return Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)


class ContextNet:
    """Two convs on the frame0 features; splits into initial hidden (tanh) and context (relu)."""

    def __init__(self, rng, in_channels: int, hidden_channels: int, context_channels: int, dtype=np.float32):
        self.hidden_channels = hidden_channels
        self.context_channels = context_channels
        self._params = {
            "conv1.w": _conv(rng, in_channels, in_channels, 3, dtype),
            "conv1.b": _bias(in_channels, dtype),
            "conv2.w": _conv(rng, hidden_channels + context_channels, in_channels, 3, dtype),
            "conv2.b": _bias(hidden_channels + context_channels, dtype),
        }

    def params(self) -> dict[str, Tensor]:
        return dict(self._params)

    def __call__(self, f0: Tensor) -> tuple[Tensor, Tensor]:
        p = self._params
        x = tt.relu(tt.conv2d(f0, p["conv1.w"], p["conv1.b"], stride=1, padding=1))
        x = tt.conv2d(x, p["conv2.w"], p["conv2.b"], stride=1, padding=1)
        h0 = tt.tanh(tt.narrow(x, 0, 0, self.hidden_channels))
        ctx = tt.relu(tt.narrow(x, 0, self.hidden_channels, self.context_channels))
        return h0, ctx


def aggregate_motion(m: Tensor, motion: Tensor) -> Tensor:
    """Attention-weighted global mix: out[:, i] = sum_j m[i, j] * motion[:, j]."""
    c, h8, w8 = motion.shape
    n = h8 * w8
    if m.shape != (n, n):
        raise DimensionError(f"aggregate_motion: attention {tuple(m.shape)} does not match {n} cells")
    flat = tt.reshape(motion, (c, n))
    return tt.reshape(tt.transpose(tt.matmul(m, tt.transpose(flat))), (c, h8, w8))


class Refiner:
    """Recurrent update cell; hidden state stays in (-1, 1) by construction."""

    def __init__(
        self,
        rng,
        context_channels: int = 64,
        hidden_channels: int = 96,
        motion_channels: int = 48,
        premix_channels: int = 64,
        head_channels: int = 48,
        lookup_radius: int = 3,
        dtype=np.float32,
    ):
        if lookup_radius < 0:
            raise ParameterError(f"lookup_radius must be >= 0, got {lookup_radius}")
        self.radius = lookup_radius
        self.hidden_channels = hidden_channels
        k2 = (2 * lookup_radius + 1) ** 2
        cm = motion_channels + 2  # encoded motion plus the flow itself
        gru_in = hidden_channels + premix_channels
        self._params = {
            "motion.w": _conv(rng, motion_channels, k2 + 2, 3, dtype),
            "motion.b": _bias(motion_channels, dtype),
            "premix.w": _conv(rng, premix_channels, context_channels + 2 * cm, 3, dtype),
            "premix.b": _bias(premix_channels, dtype),
            "gate_z.w": _conv(rng, hidden_channels, gru_in, 1, dtype, gain=1.0),
            "gate_z.b": _bias(hidden_channels, dtype),
            "gate_r.w": _conv(rng, hidden_channels, gru_in, 1, dtype, gain=1.0),
            "gate_r.b": _bias(hidden_channels, dtype),
            "gate_h.w": _conv(rng, hidden_channels, gru_in, 1, dtype, gain=1.0),
            "gate_h.b": _bias(hidden_channels, dtype),
            "head1.w": _conv(rng, head_channels, hidden_channels, 1, dtype),
            "head1.b": _bias(head_channels, dtype),
            "head2.w": _conv(rng, 2, head_channels, 1, dtype),
            "head2.b": _bias(2, dtype),
        }

    def params(self) -> dict[str, Tensor]:
        return dict(self._params)

    def refine_step(self, hidden: Tensor, ctx: Tensor, m: Tensor, correlation: Tensor, flow: Tensor) -> tuple[Tensor, Tensor]:
        """One update: returns (next_hidden, delta_flow). flow is treated as constant."""
        p = self._params
        looked = tt.lookup_correlation(correlation, flow, self.radius)
        enc = tt.relu(tt.conv2d(tt.concat([looked, flow], axis=0), p["motion.w"], p["motion.b"], stride=1, padding=1))
        motion = tt.concat([enc, flow], axis=0)
        agg = aggregate_motion(m, motion)
        x = tt.relu(tt.conv2d(tt.concat([ctx, motion, agg], axis=0), p["premix.w"], p["premix.b"], stride=1, padding=1))
        hx = tt.concat([hidden, x], axis=0)
        z = tt.sigmoid(tt.conv2d(hx, p["gate_z.w"], p["gate_z.b"]))
        r = tt.sigmoid(tt.conv2d(hx, p["gate_r.w"], p["gate_r.b"]))
        cand = tt.tanh(tt.conv2d(tt.concat([tt.mul(r, hidden), x], axis=0), p["gate_h.w"], p["gate_h.b"]))
        # convex mix of two (-1,1) signals keeps the state bounded
        nxt = tt.add(hidden, tt.mul(z, tt.sub(cand, hidden)))
        delta = tt.conv2d(tt.relu(tt.conv2d(nxt, p["head1.w"], p["head1.b"])), p["head2.w"], p["head2.b"])
        return nxt, delta

    def run_refinement(
        self,
        init_flow: Tensor,
        correlation: Tensor,
        m: Tensor,
        hidden: Tensor,
        ctx: Tensor,
        iters: int = 6,
        detach_iterates: bool = True,
    ) -> list[Tensor]:
        """All intermediate flow estimates, one per iteration, in cell units.

        detach_iterates=False keeps the running flow on the gradient graph;
        training wants the cut, finite-difference verification does not.
        """
        if iters < 1:
            raise ParameterError(f"iters must be >= 1, got {iters}")
        flows = []
        flow = init_flow
        for _ in range(iters):
            if detach_iterates:
                flow = tt.detach(flow)
            hidden, delta = self.refine_step(hidden, ctx, m, correlation, flow)
            flow = tt.add(flow, delta)
            flows.append(flow)
        return flows


def upsample_flow_8x(flow: np.ndarray) -> np.ndarray:
    """Bilinear 8x upsample of a cell-unit flow map, rescaled to pixel units."""
    flow = np.asarray(flow.data if isinstance(flow, Tensor) else flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise DimensionError(f"upsample_flow_8x: want [2,h8,w8], got {flow.shape}")
    h8, w8 = flow.shape[1:]
    ys, xs = np.mgrid[0 : 8 * h8, 0 : 8 * w8].astype(np.float64)
    coords = np.stack([(xs - 3.5) / 8.0, (ys - 3.5) / 8.0])
    with tt.no_grad():
        vals, _ = tt.bilinear_sample(Tensor(flow), Tensor(coords))
    return vals.data * 8.0
