"""Dense tensors with taped reverse-mode differentiation.

A Tensor wraps a float32/float64 numpy array. Every differentiable
operation appends one node to a module-level tape while gradients are
enabled; backward() walks the tape once, in reverse execution order,
accumulating vector-Jacobian products into .grad of every tensor that
needs one. One tape holds one graph: backward() consumes and clears it.
Single-threaded by design.

grad_check() verifies any scalar-valued tensor function against central
finite differences and is the reference every operation is tested with.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DegenerateMaskError,
    DimensionError,
    GraphError,
    ParameterError,
    ShapeError,
)

__all__ = [
    "Tensor",
    "no_grad",
    "backward",
    "clear_graph",
    "graph_size",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "tanh",
    "sigmoid",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "narrow",
    "detach",
    "tsum",
    "tmean",
    "softmax_rows",
    "conv2d",
    "bilinear_sample",
    "lookup_correlation",
    "l1_loss",
    "grad_check",
]

_FLOAT_TYPES = (np.float32, np.float64)


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_TYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Shape-carrying float array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_needs_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        # interior graph nodes need grad storage even when not leaves
        self._needs_grad = self.requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def numel(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


# ---------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------

_TAPE: list = []
_GRAD_ENABLED = True


class no_grad:
    """Context manager: operations inside are not recorded."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def clear_graph():
    _TAPE.clear()


def graph_size() -> int:
    return len(_TAPE)


def _record(out: Tensor, parents, vjp):
    """Register out on the tape when any parent participates in a gradient."""
    if not _GRAD_ENABLED:
        return
    if any(p._needs_grad for p in parents):
        out._needs_grad = True
        _TAPE.append((out, vjp))


def _acc(t: Tensor, g: np.ndarray):
    if not t._needs_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor):
    """Accumulate dloss/dt into .grad for every tensor needing it.

    Visits each recorded operation exactly once, in reverse execution
    order, then clears the tape. The loss must be a scalar.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    try:
        for out, vjp in reversed(_TAPE):
            if out.grad is None:
                continue  # not on any path to the loss
            vjp(out.grad)
    finally:
        _TAPE.clear()


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def vjp(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    _record(out, (a, b), vjp)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def vjp(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    _record(out, (a, b), vjp)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def vjp(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    _record(out, (a, b), vjp)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    _record(out, (a,), lambda g: _acc(a, -g))
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))

    def vjp(g):
        _acc(a, g * (a.data > 0))

    _record(out, (a,), vjp)
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)

    def vjp(g):
        _acc(a, g * (1.0 - y * y))

    _record(out, (a,), vjp)
    return out


def sigmoid(a: Tensor) -> Tensor:
    # stable in both tails
    y = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))), np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    y = y.astype(a.data.dtype)
    out = Tensor(y)

    def vjp(g):
        _acc(a, g * y * (1.0 - y))

    _record(out, (a,), vjp)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {tuple(a.shape)} @ {tuple(b.shape)}")
    out = Tensor(a.data @ b.data)

    def vjp(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    _record(out, (a, b), vjp)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expected 2-D, got shape {tuple(a.shape)}")
    out = Tensor(a.data.T.copy())
    _record(out, (a,), lambda g: _acc(a, g.T))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    _record(out, (a,), lambda g: _acc(a, g.reshape(a.shape)))
    return out


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _acc(p, g[tuple(sl)])

    _record(out, tuple(parts), vjp)
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(a.data[sl].copy())

    def vjp(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        _acc(a, full)

    _record(out, (a,), vjp)
    return out


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


def tsum(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype))
    _record(out, (a,), lambda g: _acc(a, np.broadcast_to(g, a.shape).astype(a.data.dtype)))
    return out


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(np.asarray(a.data.mean(), dtype=a.data.dtype))
    _record(out, (a,), lambda g: _acc(a, np.broadcast_to(g / n, a.shape).astype(a.data.dtype)))
    return out


# ---------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------


def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of a 2-D tensor at a given temperature.

    Each row is shifted by its max before exponentiation, so magnitudes
    around 1e4 stay finite. temperature must be > 0.
    """
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows: expected 2-D, got shape {tuple(x.shape)}")
    if not (temperature > 0):
        raise ParameterError(f"softmax_rows: temperature must be > 0, got {temperature}")
    z = (x.data - x.data.max(axis=1, keepdims=True)) / temperature
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        inner = (g * s).sum(axis=1, keepdims=True)
        _acc(x, (g - inner) * s / temperature)

    _record(out, (x,), vjp)
    return out


def normalize_cells(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-cell channel normalization of x[c,h,w]: zero mean, unit variance
    over the channel axis at every spatial position.

    Dot products of normalized cell vectors become cosine-like, which keeps
    a correlation argmax on content instead of on the shared activation
    mean. eps guards constant cells (their output is zero).
    """
    if x.data.ndim != 3:
        raise DimensionError(f"normalize_cells: expected [c,h,w], got shape {tuple(x.shape)}")
    if not (eps > 0):
        raise ParameterError(f"normalize_cells: eps must be > 0, got {eps}")
    c = x.shape[0]
    mu = x.data.mean(axis=0, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered**2).mean(axis=0, keepdims=True) + eps)
    y = centered * inv
    out = Tensor(y)

    def vjp(g):
        gm = g.mean(axis=0, keepdims=True)
        proj = (g * y).mean(axis=0, keepdims=True)
        _acc(x, ((g - gm - y * proj) * inv).astype(x.data.dtype))

    _record(out, (x,), vjp)
    return out


# ---------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x[c_in,h,w] with w[c_out,c_in,kh,kw].

    Output spatial size is (h + 2*padding - kh)/stride + 1 per axis and
    must come out integral, otherwise a ShapeError is raised.
    """
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise DimensionError(f"conv2d: expected x[c,h,w], w[o,c,kh,kw], got {tuple(x.shape)} and {tuple(w.shape)}")
    cin, h, wd = x.shape
    cout, cink, kh, kw = w.shape
    if cink != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, kernel expects {cink}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d: bad stride={stride} or padding={padding}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel ({kh}x{kw}) larger than padded input ({h + 2 * padding}x{wd + 2 * padding})")
    if (h + 2 * padding - kh) % stride or (wd + 2 * padding - kw) % stride:
        raise ShapeError(
            f"conv2d: non-integral output size for input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]  # [cin,ho,wo,kh,kw]
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    y = cols @ wmat.T  # [ho*wo, cout]
    y = y.T.reshape(cout, ho, wo)
    if b is not None:
        y = y + b.data.reshape(cout, 1, 1)
    out = Tensor(y)

    def vjp(g):
        gf = g.reshape(cout, ho * wo).T  # [ho*wo, cout]
        _acc(w, (gf.T @ cols).reshape(w.shape))
        if b is not None:
            _acc(b, g.sum(axis=(1, 2)).reshape(b.shape))
        if x._needs_grad:
            gcols = gf @ wmat  # [ho*wo, cin*kh*kw]
            gwin = gcols.reshape(ho, wo, cin, kh, kw).transpose(2, 3, 4, 0, 1)
            gxp = np.zeros((cin, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gwin[:, i, j]
            _acc(x, gxp[:, padding : padding + h, padding : padding + wd] if padding else gxp)

    _record(out, (x, w, b) if b is not None else (x, w), vjp)
    return out


# ---------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------


def _corner_indices(cx, cy, h, w):
    """Clamped 4-neighbor setup shared by the samplers.

    The base index is clamped to [0, size-2] so a coordinate exactly on
    the far border stays representable (weight 1 on the last texel).
    """
    cxc = np.clip(cx, 0.0, w - 1.0)
    cyc = np.clip(cy, 0.0, h - 1.0)
    x0 = np.clip(np.floor(cxc), 0, w - 2).astype(np.int64)
    y0 = np.clip(np.floor(cyc), 0, h - 2).astype(np.int64)
    tx = cxc - x0
    ty = cyc - y0
    return x0, y0, tx, ty


def bilinear_sample(field: Tensor, coords: Tensor):
    """Sample field[c,h,w] at coords[2,...] = (x, y) per output location.

    Returns (values, valid) where values has shape [c, *coords.shape[1:]].
    Coordinates are clamped to the border; valid marks locations whose
    four interpolation neighbors all lie in-bounds, i.e. x in [0, w-1]
    and y in [0, h-1]. Gradients flow to both field and coords (the
    coordinate derivative is zero in clamped regions).
    """
    if field.data.ndim != 3 or coords.data.ndim < 2 or coords.shape[0] != 2:
        raise DimensionError(f"bilinear_sample: expected field[c,h,w], coords[2,...], got {tuple(field.shape)} and {tuple(coords.shape)}")
    c, h, w = field.shape
    if h < 2 or w < 2:
        raise ShapeError(f"bilinear_sample: field must be at least 2x2, got {h}x{w}")
    cx = coords.data[0]
    cy = coords.data[1]
    valid = (cx >= 0) & (cx <= w - 1) & (cy >= 0) & (cy <= h - 1)
    x0, y0, tx, ty = _corner_indices(cx, cy, h, w)
    x1 = x0 + 1
    y1 = y0 + 1
    v00 = field.data[:, y0, x0]
    v01 = field.data[:, y0, x1]
    v10 = field.data[:, y1, x0]
    v11 = field.data[:, y1, x1]
    w00 = (1 - ty) * (1 - tx)
    w01 = (1 - ty) * tx
    w10 = ty * (1 - tx)
    w11 = ty * tx
    out = Tensor(v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11)

    def vjp(g):
        if field._needs_grad:
            gf = np.zeros((c, h * w), dtype=g.dtype)
            gft = gf.T  # view: add.at indexes rows
            for idx, wt in (
                (y0 * w + x0, w00),
                (y0 * w + x1, w01),
                (y1 * w + x0, w10),
                (y1 * w + x1, w11),
            ):
                np.add.at(gft, idx.ravel(), (g * wt).reshape(c, -1).T)
            _acc(field, gf.reshape(c, h, w))
        if coords._needs_grad:
            # derivative of the clamped interpolant; zero outside (0, size-1)
            dx_open = (cx > 0) & (cx < w - 1)
            dy_open = (cy > 0) & (cy < h - 1)
            ddx = ((1 - ty) * (v01 - v00) + ty * (v11 - v10)) * dx_open
            ddy = ((1 - tx) * (v10 - v00) + tx * (v11 - v01)) * dy_open
            gc = np.stack([(g * ddx).sum(axis=0), (g * ddy).sum(axis=0)])
            _acc(coords, gc)

    _record(out, (field, coords), vjp)
    return out, valid


def lookup_correlation(corr: Tensor, flow: Tensor, radius: int) -> Tensor:
    """Sample each cell's correlation row around its flow target.

    corr is [n, n] with row i holding cell i's correlation to every
    target cell, viewed as an h8 x w8 map (n = h8*w8, taken from flow's
    spatial shape). For each cell and each offset (dy, dx) in the
    (2*radius+1)^2 window centered on (cell + flow), the row map is
    sampled bilinearly with border clamping. Output is
    [(2*radius+1)^2, h8, w8]; gradients reach corr and flow.
    """
    if radius < 0:
        raise ParameterError(f"lookup_correlation: radius must be >= 0, got {radius}")
    if flow.data.ndim != 3 or flow.shape[0] != 2:
        raise DimensionError(f"lookup_correlation: expected flow[2,h,w], got {tuple(flow.shape)}")
    h8, w8 = flow.shape[1], flow.shape[2]
    n = h8 * w8
    if corr.data.ndim != 2 or corr.shape != (n, n):
        raise DimensionError(f"lookup_correlation: corr shape {tuple(corr.shape)} does not match {n} cells")
    k = 2 * radius + 1
    gy, gx = np.divmod(np.arange(n), w8)
    offs = np.arange(-radius, radius + 1, dtype=flow.data.dtype)
    dys = np.repeat(offs, k)
    dxs = np.tile(offs, k)
    cx = (gx + flow.data[0].ravel())[:, None] + dxs[None, :]  # [n, k*k]
    cy = (gy + flow.data[1].ravel())[:, None] + dys[None, :]
    x0, y0, tx, ty = _corner_indices(cx, cy, h8, w8)
    x1 = x0 + 1
    y1 = y0 + 1
    rows = np.arange(n)[:, None]
    i00 = y0 * w8 + x0
    i01 = y0 * w8 + x1
    i10 = y1 * w8 + x0
    i11 = y1 * w8 + x1
    v00 = corr.data[rows, i00]
    v01 = corr.data[rows, i01]
    v10 = corr.data[rows, i10]
    v11 = corr.data[rows, i11]
    w00 = (1 - ty) * (1 - tx)
    w01 = (1 - ty) * tx
    w10 = ty * (1 - tx)
    w11 = ty * tx
    vals = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11  # [n, k*k]
    out = Tensor(np.ascontiguousarray(vals.T).reshape(k * k, h8, w8))

    def vjp(g):
        gv = g.reshape(k * k, n).T  # [n, k*k]
        if corr._needs_grad:
            gc = np.zeros_like(corr.data)
            for idx, wt in ((i00, w00), (i01, w01), (i10, w10), (i11, w11)):
                np.add.at(gc, (rows, idx), gv * wt)
            _acc(corr, gc)
        if flow._needs_grad:
            dx_open = (cx > 0) & (cx < w8 - 1)
            dy_open = (cy > 0) & (cy < h8 - 1)
            ddx = ((1 - ty) * (v01 - v00) + ty * (v11 - v10)) * dx_open
            ddy = ((1 - tx) * (v10 - v00) + tx * (v11 - v01)) * dy_open
            gfx = (gv * ddx).sum(axis=1).reshape(h8, w8)
            gfy = (gv * ddy).sum(axis=1).reshape(h8, w8)
            _acc(flow, np.stack([gfx, gfy]))

    _record(out, (corr, flow), vjp)
    return out


# ---------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------


def l1_loss(pred: Tensor, target: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute difference, optionally over mask-selected entries.

    pred and target broadcast together; mask (plain array, not
    differentiated) broadcasts to the same shape. A mask selecting zero
    entries raises DegenerateMaskError.
    """
    diff = pred.data - target.data
    if mask is None:
        count = diff.size
        loss_val = np.abs(diff).sum() / count
        m = None
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=diff.dtype), diff.shape)
        count = float(m.sum())
        if count == 0:
            raise DegenerateMaskError("l1_loss: mask selects no entries")
        loss_val = (np.abs(diff) * m).sum() / count
    out = Tensor(np.asarray(loss_val, dtype=diff.dtype))

    def vjp(g):
        base = np.sign(diff) * (g / count)
        if m is not None:
            base = base * m
        _acc(pred, _unbroadcast(base, pred.shape))
        _acc(target, _unbroadcast(-base, target.shape))

    _record(out, (pred, target), vjp)
    return out


# ---------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------


def grad_check(f, x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference grads.

    f maps x to a scalar Tensor and is re-evaluated 2*numel times, so
    keep x small. Error per coordinate is |a - n| / max(1, |a|, |n|);
    run in float64 for meaningful results.
    """
    if not x._needs_grad:
        raise GraphError("grad_check: x is not tracked; construct it with requires_grad=True")
    clear_graph()
    x.grad = None
    y = f(x)
    backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data.reshape(()))
            flat[i] = orig - eps
            fm = float(f(x).data.reshape(()))
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))
