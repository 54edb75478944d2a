"""Reverse-mode automatic differentiation over dense numpy arrays.

The engine is deliberately small: it supports exactly the operations a 3D
convolutional generator/critic pair needs, in NCDHW layout, with no general
broadcasting (scalar forms only).  Every backward rule is itself written in
terms of the public ops, so calling ``grad(..., create_graph=True)`` records
the backward pass as a differentiable computation and second derivatives
(e.g. of a gradient-norm penalty) come out of the same machinery.

Conventions:
  * graphs are acyclic; a node never references its own output
  * subgradient 0 at the relu/abs kink, sign(0) == 0
  * mean/sum reductions divide by the true element count
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "no_grad", "is_grad_enabled",
    "concat_channels", "conv3d", "activation", "normalize", "NormState",
    "linear", "pointwise", "binary", "reduce", "matmul",
    "backward", "grad", "finite_difference_gradient",
]


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


# ---------------------------------------------------------------------------
# graph bookkeeping

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording inside its block."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class _enable_grad:
    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = True
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class _Node:
    """One recorded operation: its differentiable inputs and the vjp rule.

    ``vjp(grad_out)`` returns one gradient Tensor (or None) per input.  The
    rule must build its result through the public ops so that running it
    under an enabled graph yields a differentiable backward pass.
    """

    __slots__ = ("inputs", "vjp")

    def __init__(self, inputs: tuple["Tensor", ...], vjp: Callable):
        self.inputs = inputs
        self.vjp = vjp


class Tensor:
    """A dense real array plus optional computation-graph membership.

    Values are float32 or float64 (64-bit is the correctness mode; 32-bit is
    for training throughput).  Tensors are immutable once created as far as
    the graph is concerned; the optimizer replaces ``data`` wholesale between
    steps, never mid-graph.
    """

    __slots__ = ("data", "requires_grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.size == 0:
            raise ShapeError("zero-sized tensors are not supported")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._node: Optional[_Node] = None

    # -- inspection ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        grad_tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad_tag})"

    # -- operator sugar (scalar or same-shape tensor operands) --------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(negate(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul_scalar(self, 1.0 / float(other))

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method aliases used throughout the model code ----------------------

    def abs(self):
        return absolute(self)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)

    def exp(self):
        return exp(self)

    def reciprocal(self):
        return reciprocal(self)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def expand(self, shape):
        return expand(self, shape)

    def narrow(self, axis, start, length):
        return narrow(self, axis, start, length)


def _result(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap op output, recording a graph node when tracking is on."""
    track = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(data)
    if track:
        out.requires_grad = True
        out._node = _Node(tuple(inputs), vjp)
    return out


def _need(t: Tensor) -> bool:
    return t.requires_grad


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def vjp(g):
        return (g if _need(a) else None, g if _need(b) else None)

    return _result(a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def vjp(g):
        return (g if _need(a) else None, negate(g) if _need(b) else None)

    return _result(a.data - b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def vjp(g):
        return (mul(g, b) if _need(a) else None,
                mul(g, a) if _need(b) else None)

    return _result(a.data * b.data, (a, b), vjp)


def add_scalar(x: Tensor, c: float) -> Tensor:
    def vjp(g):
        return (g,)

    return _result(x.data + x.data.dtype.type(c), (x,), vjp)


def mul_scalar(x: Tensor, c: float) -> Tensor:
    def vjp(g):
        return (mul_scalar(g, c),)

    return _result(x.data * x.data.dtype.type(c), (x,), vjp)


def negate(x: Tensor) -> Tensor:
    def vjp(g):
        return (negate(g),)

    return _result(-x.data, (x,), vjp)


def absolute(x: Tensor) -> Tensor:
    # subgradient convention: sign(0) == 0
    def vjp(g):
        return (mul(g, Tensor(np.sign(x.data))),)

    return _result(np.abs(x.data), (x,), vjp)


def square(x: Tensor) -> Tensor:
    def vjp(g):
        return (mul(g, mul_scalar(x, 2.0)),)

    return _result(np.square(x.data), (x,), vjp)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise ValueError("sqrt: negative input outside the real domain")

    def vjp(g):
        # d sqrt/dx = 0.5 / sqrt(x); recomputed so the node stays acyclic
        return (mul(g, mul_scalar(reciprocal(sqrt(x)), 0.5)),)

    return _result(np.sqrt(x.data), (x,), vjp)


def exp(x: Tensor) -> Tensor:
    def vjp(g):
        return (mul(g, exp(x)),)

    return _result(np.exp(x.data), (x,), vjp)


def reciprocal(x: Tensor) -> Tensor:
    def vjp(g):
        return (negate(mul(g, square(reciprocal(x)))),)

    return _result(1.0 / x.data, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(a % ndim for a in axes)


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes_n = _normalize_axes(axes, x.ndim)

    def vjp(g):
        kshape = tuple(1 if i in axes_n else d for i, d in enumerate(x.shape))
        return (expand(reshape(g, kshape), x.shape),)

    return _result(np.sum(x.data, axis=axes_n, keepdims=keepdims), (x,), vjp)


def reduce_mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes_n = _normalize_axes(axes, x.ndim)
    n = int(np.prod([x.shape[i] for i in axes_n])) if axes_n else 1
    return mul_scalar(reduce_sum(x, axes_n, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def vjp(g):
        return (reshape(g, x.shape),)

    return _result(x.data.reshape(shape), (x,), vjp)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (transpose(g, inverse),)

    # a strided view: BLAS consumes transposed operands directly and
    # elementwise ops allocate C-ordered results, so no eager copy
    return _result(x.data.transpose(axes), (x,), vjp)


def expand(x: Tensor, shape) -> Tensor:
    """Broadcast size-1 axes of x up to ``shape`` (ranks must match)."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != x.ndim:
        raise ShapeError(f"expand: rank mismatch {x.shape} -> {shape}")
    bcast = []
    for i, (src, dst) in enumerate(zip(x.shape, shape)):
        if src != dst:
            if src != 1:
                raise ShapeError(f"expand: cannot grow axis {i} from {src} to {dst}")
            bcast.append(i)
    bcast = tuple(bcast)

    def vjp(g):
        return (reduce_sum(g, bcast, keepdims=True) if bcast else g,)

    return _result(np.broadcast_to(x.data, shape), (x,), vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along one axis."""
    axis = axis % x.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) outside axis of size {x.shape[axis]}")
    index = tuple(slice(start, start + length) if i == axis else slice(None)
                  for i in range(x.ndim))

    def vjp(g):
        return (embed(g, x.shape, axis, start),)

    return _result(x.data[index], (x,), vjp)


def embed(x: Tensor, shape, axis: int, start: int) -> Tensor:
    """Place x into a zero tensor of ``shape`` at ``start`` along one axis."""
    shape = tuple(int(s) for s in shape)
    axis = axis % len(shape)
    length = x.shape[axis]

    def vjp(g):
        return (narrow(g, axis, start, length),)

    out = np.zeros(shape, dtype=x.data.dtype)
    index = tuple(slice(start, start + length) if i == axis else slice(None)
                  for i in range(len(shape)))
    out[index] = x.data
    return _result(out, (x,), vjp)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = tuple(xs)  # snapshot: callers may keep growing their list
    if not xs:
        raise ShapeError("concat: need at least one input")
    if len(xs) == 1:
        x = xs[0]

        def vjp1(g):
            return (g,)

        return _result(x.data.copy(), (x,), vjp1)
    ref = xs[0]
    axis = axis % ref.ndim
    for t in xs[1:]:
        if t.ndim != ref.ndim or any(
                t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis):
            raise ShapeError(f"concat: off-axis shape mismatch {ref.shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in xs]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g):
        return tuple(
            narrow(g, axis, int(offsets[i]), sizes[i]) if _need(t) else None
            for i, t in enumerate(xs))

    return _result(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), vjp)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate NCDHW tensors along the channel axis."""
    return concat(xs, axis=1)


# ---------------------------------------------------------------------------
# padding / windowing / matmul — the substrate conv3d is built from


def pad3d(x: Tensor, pads) -> Tensor:
    """Zero-pad the three trailing spatial axes; pads = 3 x (before, after)."""
    if x.ndim != 5:
        raise ShapeError(f"pad3d expects NCDHW input, got shape {x.shape}")
    pads = tuple((int(b), int(a)) for b, a in pads)
    full = ((0, 0), (0, 0)) + pads

    def vjp(g):
        return (crop3d(g, pads),)

    return _result(np.pad(x.data, full), (x,), vjp)


def crop3d(x: Tensor, pads) -> Tensor:
    """Inverse of pad3d: drop (before, after) entries per spatial axis."""
    pads = tuple((int(b), int(a)) for b, a in pads)
    index = (slice(None), slice(None)) + tuple(
        slice(b, x.shape[i + 2] - a) for i, (b, a) in enumerate(pads))

    def vjp(g):
        return (pad3d(g, pads),)

    return _result(x.data[index], (x,), vjp)


def _out_extent(n: int, k: int, s: int) -> int:
    return (n - k) // s + 1


def unfold3d(x: Tensor, ksize, stride) -> Tensor:
    """im2col for volumes: (N,C,D,H,W) -> (N*L, C*kd*kh*kw).

    Rows iterate output positions in (n, do, ho, wo) order, columns iterate
    (c, kd, kh, kw).  L is the output voxel count for the given stride.
    """
    if x.ndim != 5:
        raise ShapeError(f"unfold3d expects NCDHW input, got shape {x.shape}")
    kd, kh, kw = ksize
    sd, sh, sw = stride
    n, c, d, h, w = x.shape
    if kd > d or kh > h or kw > w:
        raise ShapeError(f"unfold3d: window {ksize} larger than input {(d, h, w)}")
    in_shape = x.shape

    def vjp(g):
        return (fold3d(g, in_shape, ksize, stride),)

    win = np.lib.stride_tricks.sliding_window_view(x.data, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::sd, ::sh, ::sw]
    do, ho, wo = win.shape[2:5]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * do * ho * wo, c * kd * kh * kw)
    return _result(cols, (x,), vjp)


def fold3d(rows: Tensor, out_shape, ksize, stride) -> Tensor:
    """Adjoint of unfold3d: scatter-add window entries back onto the volume."""
    kd, kh, kw = ksize
    sd, sh, sw = stride
    n, c, d, h, w = out_shape
    do, ho, wo = (_out_extent(d, kd, sd), _out_extent(h, kh, sh), _out_extent(w, kw, sw))

    def vjp(g):
        return (unfold3d(g, ksize, stride),)

    # one contiguous copy up front beats k^3 strided gathers in the loop
    blocks = np.ascontiguousarray(
        rows.data.reshape(n, do, ho, wo, c, kd, kh, kw).transpose(5, 6, 7, 0, 4, 1, 2, 3))
    out = np.zeros(out_shape, dtype=rows.data.dtype)
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                out[:, :, a:a + sd * do:sd, b:b + sh * ho:sh, e:e + sw * wo:sw] += blocks[a, b, e]
    return _result(out, (rows,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def vjp(g):
        ga = matmul(g, transpose(b)) if _need(a) else None
        gb = matmul(transpose(a), g) if _need(b) else None
        return (ga, gb)

    return _result(a.data @ b.data, (a, b), vjp)


# ---------------------------------------------------------------------------
# network-level ops


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, padding: str = "same") -> Tensor:
    """3D cross-correlation in NCDHW layout.

    ``same`` pads with zeros to a ceil(n/stride) output extent (identity on
    the spatial grid at stride 1); ``valid`` applies no padding.  Built as a
    composition of pad/unfold/matmul so gradients of any order are available.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d expects 5D x and w, got {x.shape} and {w.shape}")
    n, cin, d, h, w_ = x.shape
    cout, cin_w, kd, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv3d: input has {cin} channels but kernel expects {cin_w}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv3d: bias shape {b.shape} != ({cout},)")
    if stride < 1:
        raise ShapeError(f"conv3d: stride must be >= 1, got {stride}")

    if padding == "same":
        pads = []
        for size, k in zip((d, h, w_), (kd, kh, kw)):
            out = -(-size // stride)  # ceil division
            total = max((out - 1) * stride + k - size, 0)
            pads.append((total // 2, total - total // 2))
        pads = tuple(pads)
    elif padding == "valid":
        if kd > d or kh > h or kw > w_:
            raise ShapeError(f"conv3d: kernel {(kd, kh, kw)} larger than input {(d, h, w_)}")
        pads = ((0, 0), (0, 0), (0, 0))
    else:
        raise ValueError(f"conv3d: unknown padding {padding!r}")

    xp = pad3d(x, pads) if any(p != (0, 0) for p in pads) else x
    dp, hp, wp = xp.shape[2:]
    do = _out_extent(dp, kd, stride)
    ho = _out_extent(hp, kh, stride)
    wo = _out_extent(wp, kw, stride)

    cols = unfold3d(xp, (kd, kh, kw), (stride, stride, stride))
    w2 = reshape(w, (cout, cin * kd * kh * kw))
    out = matmul(cols, transpose(w2))                       # (N*L, Cout)
    out = transpose(reshape(out, (n, do, ho, wo, cout)), (0, 4, 1, 2, 3))
    if b is not None:
        out = add(out, expand(reshape(b, (1, cout, 1, 1, 1)), out.shape))
    return out


def activation(x: Tensor, kind: str, alpha: Optional[float] = None) -> Tensor:
    """Elementwise nonlinearity: ``elu``, ``relu`` or ``leaky_relu``.

    ``alpha`` defaults per kind: 1.0 for elu (keeps it C^1 at the origin),
    0.2 for leaky_relu.
    """
    if alpha is None:
        alpha = 1.0 if kind == "elu" else 0.2
    if kind == "relu":
        mask = (x.data > 0).astype(x.data.dtype)

        def vjp(g):
            return (mul(g, Tensor(mask)),)

        return _result(x.data * mask, (x,), vjp)

    if kind == "leaky_relu":
        dmask = np.where(x.data > 0, x.data.dtype.type(1), x.data.dtype.type(alpha))

        def vjp(g):
            return (mul(g, Tensor(dmask)),)

        return _result(x.data * dmask, (x,), vjp)

    if kind == "elu":
        pos = x.data > 0
        out = np.where(pos, x.data, alpha * np.expm1(x.data))
        pos_c = pos.astype(x.data.dtype)

        def vjp(g):
            # d elu/dx = 1 for x>0, alpha*exp(x) for x<=0; exp recomputed so the
            # rule stays expressible in primitives (second order comes free)
            slope = add(Tensor(pos_c), mul(exp(x), Tensor((1.0 - pos_c) * alpha)))
            return (mul(g, slope),)

        return _result(out, (x,), vjp)

    raise ValueError(f"activation: unknown kind {kind!r}")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    return activation(x, "elu", alpha)


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    return activation(x, "leaky_relu", alpha)


@dataclass
class NormState:
    """Running batch-norm statistics (per channel), updated in train mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    initialized: bool = False

    @classmethod
    def for_channels(cls, channels: int, momentum: float = 0.1,
                     dtype=np.float64) -> "NormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype),
                   momentum)

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray):
        if not self.initialized:
            self.mean = batch_mean.copy()
            self.var = batch_var.copy()
            self.initialized = True
        else:
            m = self.momentum
            self.mean = (1 - m) * self.mean + m * batch_mean
            self.var = (1 - m) * self.var + m * batch_var


def _channel_affine(y: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    c = y.shape[1]
    g = expand(reshape(gain, (1, c, 1, 1, 1)), y.shape)
    b = expand(reshape(bias, (1, c, 1, 1, 1)), y.shape)
    return add(mul(y, g), b)


def normalize(x: Tensor, kind: str, gain: Tensor, bias: Tensor,
              eps: float = 1e-5, mode: str = "train",
              state: Optional[NormState] = None) -> Tensor:
    """Batch or layer normalization over NCDHW input with per-channel affine.

    ``batch_norm`` normalizes each channel over (N,D,H,W); train mode uses
    batch statistics (and updates ``state`` when given), eval mode requires
    populated running statistics.  ``layer_norm`` normalizes each sample over
    (C,D,H,W).  Variances are biased (divide by n).
    """
    if x.ndim != 5:
        raise ShapeError(f"normalize expects NCDHW input, got shape {x.shape}")
    c = x.shape[1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"normalize: gain/bias must be shape ({c},)")

    if kind == "layer_norm":
        axes = (1, 2, 3, 4)
    elif kind == "batch_norm":
        axes = (0, 2, 3, 4)
    else:
        raise ValueError(f"normalize: unknown kind {kind!r}")

    if kind == "batch_norm" and mode == "eval":
        if state is None or not state.initialized:
            raise RuntimeError(
                "batch_norm in eval mode requires populated running statistics; "
                "run at least one train-mode forward first")
        rm = expand(reshape(Tensor(state.mean.astype(x.data.dtype)), (1, c, 1, 1, 1)), x.shape)
        rv = reshape(Tensor(state.var.astype(x.data.dtype)), (1, c, 1, 1, 1))
        inv = expand(reciprocal(sqrt(add_scalar(rv, eps))), x.shape)
        return _channel_affine(mul(sub(x, rm), inv), gain, bias)

    mu = reduce_mean(x, axes, keepdims=True)
    xc = sub(x, expand(mu, x.shape))
    var = reduce_mean(square(xc), axes, keepdims=True)
    inv = expand(reciprocal(sqrt(add_scalar(var, eps))), x.shape)
    out = _channel_affine(mul(xc, inv), gain, bias)

    if kind == "batch_norm" and mode == "train" and state is not None:
        state.update(mu.data.reshape(c).astype(np.float64),
                     var.data.reshape(c).astype(np.float64))
    return out


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map: (N,F) x (Fout,F) + (Fout,) -> (N,Fout)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: incompatible shapes x{x.shape}, w{w.shape}")
    out = matmul(x, transpose(w))
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
        out = add(out, expand(reshape(b, (1, w.shape[0])), out.shape))
    return out


# ---------------------------------------------------------------------------
# spec-surface dispatchers


def pointwise(x: Tensor, kind: str, c: Optional[float] = None) -> Tensor:
    if kind == "abs":
        return absolute(x)
    if kind == "square":
        return square(x)
    if kind == "sqrt":
        return sqrt(x)
    if kind == "negate":
        return negate(x)
    if kind == "add_scalar":
        return add_scalar(x, float(c))
    if kind == "mul_scalar":
        return mul_scalar(x, float(c))
    raise ValueError(f"pointwise: unknown kind {kind!r}")


def binary(x: Tensor, y: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(x, y)
    if kind == "sub":
        return sub(x, y)
    if kind == "mul":
        return mul(x, y)
    raise ValueError(f"binary: unknown kind {kind!r}")


def reduce(x: Tensor, kind: str) -> Tensor:
    if kind == "sum":
        return reduce_sum(x)
    if kind == "mean":
        return reduce_mean(x)
    raise ValueError(f"reduce: unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor) -> list[Tensor]:
    """Post-order over the grad-requiring subgraph; each node visited once."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for parent in t._node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def _propagate(loss: Tensor) -> dict[int, tuple[Tensor, Tensor]]:
    """Run the vjp sweep; returns id -> (tensor, accumulated gradient)."""
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    grads: dict[int, tuple[Tensor, Tensor]] = {
        id(loss): (loss, Tensor(np.ones_like(loss.data)))}
    for t in reversed(order):
        entry = grads.get(id(t))
        if entry is None or t._node is None:
            continue
        g = entry[1]
        partials = t._node.vjp(g)
        for parent, pg in zip(t._node.inputs, partials):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = (parent, pg if prev is None else add(prev[1], pg))
    return grads


def backward(loss: Tensor) -> dict[Tensor, Tensor]:
    """Gradient of a scalar loss for every requires_grad leaf in its graph.

    The returned map is keyed by parameter identity (the leaf Tensor itself).
    Runs with graph recording off; use :func:`grad` for higher-order needs.
    """
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any requires_grad tensor")
    with no_grad():
        grads = _propagate(loss)
    return {t: g for t, g in grads.values()
            if t.requires_grad and t._node is None}


def grad(loss: Tensor, wrt: Tensor, create_graph: bool = False) -> Tensor:
    """d loss / d wrt.

    With ``create_graph`` the backward computation is recorded, so the result
    can be differentiated again (gradient penalties need exactly this).
    """
    ctx = _enable_grad() if create_graph else no_grad()
    with ctx:
        grads = _propagate(loss)
    entry = grads.get(id(wrt))
    if entry is None:
        raise ValueError("grad: target tensor is not reachable from the loss")
    return entry[1]


def finite_difference_gradient(f: Callable[[Tensor], Tensor], x: Tensor,
                               h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar-valued f, the test oracle.

    Meant for 64-bit inputs; cost is two evaluations of f per element.
    """
    if h <= 0:
        raise ValueError("finite_difference_gradient: h must be positive")

    def evaluate(arr: np.ndarray) -> float:
        out = f(Tensor(arr))
        return out.item() if isinstance(out, Tensor) else float(out)

    base = np.array(x.data, dtype=np.float64)
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    flat_out = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate(base)
        flat[i] = orig - h
        fm = evaluate(base)
        flat[i] = orig
        flat_out[i] = (fp - fm) / (2.0 * h)
    return Tensor(out)
