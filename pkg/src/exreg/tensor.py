"""Dense n-d tensors with reverse-mode autodiff on an explicit per-step tape.

Storage is a row-major numpy array (float64 by default, float32 for speed).
Ops record their backward rule on the currently active ``Tape``; replaying
the tape in reverse order is a valid topological order because nodes are
appended in execution order.  A tape is created per training step and
dropped afterwards; it may be consumed by ``backward`` exactly once.

Broadcasting is supported only where the networks need it (bias-add,
per-channel modulation, scalars); gradients of broadcast operands are
reduced back to the operand shape.
"""

from __future__ import annotations

import os
from typing import Callable, Optional, Sequence

import numpy as np

float32 = np.float32
float64 = np.float64

DEFAULT_DTYPE = float64

# When enabled, every forward op asserts that finite inputs produced finite
# outputs.  Costs one pass over the output per op.
DEBUG_CHECK_FINITE = bool(int(os.environ.get("EXREG_DEBUG_FINITE", "0")))


def set_debug_finite(enabled: bool) -> None:
    global DEBUG_CHECK_FINITE
    DEBUG_CHECK_FINITE = bool(enabled)


class ShapeError(ValueError):
    """Invalid argument shapes/axes for a tensor op."""


class Tensor:
    """A dense array plus optional gradient buffer.

    ``grad`` is populated by ``Tape.backward`` for every tensor with
    ``requires_grad`` reachable from the loss; it always matches ``data``
    in shape.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same data, cut out of any tape."""
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division is not a registered op; divide by constants")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


_TAPE_STACK: list = []


class Tape:
    """Ordered record of ops for one backward pass.

    Use as a context manager around the forward computation; call
    ``backward(loss)`` once.  Dropping the tape frees the graph.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and replay every node once, in reverse.

        Populates ``grad`` on every requires_grad tensor reachable from
        ``loss``.  Raises if ``loss`` is not scalar or if the tape was
        already consumed.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward call")
        if not self.nodes and not loss.requires_grad:
            raise RuntimeError("loss was not produced under this tape (no recorded ops)")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = gi.astype(inp.data.dtype, copy=True)
                else:
                    inp.grad += gi


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor) -> None:
    """Backward on the innermost active tape (see ``Tape.backward``)."""
    tape = active_tape()
    if tape is None:
        raise RuntimeError("no active tape")
    tape.backward(loss)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _finite_check(out: np.ndarray) -> None:
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite value produced by a forward op")


def _make(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out_data``, recording the node if a tape is active and needed."""
    _finite_check(out_data)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcastable(a: np.ndarray, b: np.ndarray, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are not compatible") from None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_broadcastable(a.data, b.data, "add")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_broadcastable(a.data, b.data, "sub")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_broadcastable(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(ad * bd, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)

    return _make(-a.data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0), (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    # Stable in both tails.
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * (0.5 / out),)

    return _make(out, (a,), bwd)


def abs_(a: Tensor) -> Tensor:
    # Subgradient 0 at exactly 0.
    sign = np.sign(a.data)

    def bwd(g):
        return (g * sign,)

    return _make(np.abs(a.data), (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim, opname):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"{opname}: axis {ax} out of range for ndim {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def sum_(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim, "sum")
    shape = a.shape

    def bwd(g):
        gk = np.expand_dims(g, axes) if g.ndim != len(shape) else g
        return (np.broadcast_to(gk, shape),)

    return _make(a.data.sum(axis=axes), (a,), bwd)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim, "mean")
    shape = a.shape
    count = 1
    for ax in axes:
        count *= shape[ax]

    def bwd(g):
        gk = np.expand_dims(g, axes) if g.ndim != len(shape) else g
        return (np.broadcast_to(gk, shape) / count,)

    return _make(a.data.mean(axis=axes), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _make(out, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} is not a permutation of ndim {a.ndim}")
    inv = np.argsort(axes)

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"narrow: axis {axis} out of range for ndim {a.ndim}")
    axis = axis % a.ndim
    if start < 0 or length < 1 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: slice [{start}:{start + length}] exceeds size {a.shape[axis]}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    in_shape = a.shape

    def bwd(g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        gx[sl] = g
        return (gx,)

    return _make(a.data[sl].copy(), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    nd = tensors[0].ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"concat: axis {axis} out of range for ndim {nd}")
    axis = axis % nd
    for t in tensors[1:]:
        a, b = tensors[0].shape, t.shape
        if len(a) != len(b) or any(i != axis and a[i] != b[i] for i in range(len(a))):
            raise ShapeError(f"concat: shape {b} incompatible with {a} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(sizes)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# matmul / softmax / layer norm


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim not in (2, 3) or b.ndim != a.ndim:
        raise ShapeError(f"matmul: expected matching 2-d or 3-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape[-1]} vs {b.shape[-2]}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape[0]} vs {b.shape[0]}")
    ad, bd = a.data, b.data

    def bwd(g):
        return (g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g)

    return _make(ad @ bd, (a, b), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for ndim {a.ndim}")
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), bwd)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gx),)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# spatial ops (NCHW)


def _require_nchw(x: Tensor, opname: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{opname}: expected 4-d N,C,H,W input, got shape {x.shape}")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """(N,C,H,W) -> (N, C*kh*kw, Ho*Wo) patch matrix."""
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
    )
    return np.ascontiguousarray(cols).reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add patches back onto the image."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for a in range(kh):
        ha = a + stride * ho
        for b in range(kw):
            wb = b + stride * wo
            out[:, :, a:ha:stride, b:wb:stride] += cols[:, :, a, b]
    if padding:
        out = out[:, :, padding:hp - padding, padding:wp - padding]
    return np.ascontiguousarray(out)


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    n = x.shape[0]
    k = w.shape[0]
    cols, ho, wo = _im2col(x, w.shape[2], w.shape[3], stride, padding)
    out = np.matmul(w.reshape(k, -1), cols).reshape(n, k, ho, wo)
    return out, cols


def _conv_dw(cols: np.ndarray, gout: np.ndarray, w_shape) -> np.ndarray:
    k = w_shape[0]
    g2 = gout.reshape(gout.shape[0], k, -1)
    dw = np.zeros((k, cols.shape[1]), dtype=cols.dtype)
    for i in range(cols.shape[0]):
        dw += g2[i] @ cols[i].T
    return dw.reshape(w_shape)


def _conv_dx(gout: np.ndarray, w: np.ndarray, x_shape, stride: int, padding: int) -> np.ndarray:
    n, k = gout.shape[0], w.shape[0]
    dcols = np.matmul(w.reshape(k, -1).T, gout.reshape(n, k, -1))
    return _col2im(dcols, x_shape, w.shape[2], w.shape[3], stride, padding)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N,C,H,W) with (K,C,kh,kw) and per-K bias.

    The output size (H + 2*padding - kh)/stride + 1 must be a whole number.
    """
    _require_nchw(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d K,C,kh,kw weight, got shape {weight.shape}")
    n, c, h, w_ = x.shape
    k, cw, kh, kw = weight.shape
    if cw != c:
        raise ShapeError(f"conv2d: input channels {c} != weight channels {cw}")
    if kh < 1 or kw < 1 or stride < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} and stride {stride} must be >= 1")
    if (h + 2 * padding - kh) % stride != 0 or (h + 2 * padding - kh) < 0:
        raise ShapeError(f"conv2d: height {h} with padding {padding}, kernel {kh}, stride {stride} "
                         "does not divide evenly")
    if (w_ + 2 * padding - kw) % stride != 0 or (w_ + 2 * padding - kw) < 0:
        raise ShapeError(f"conv2d: width {w_} with padding {padding}, kernel {kw}, stride {stride} "
                         "does not divide evenly")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({k},)")
    out, cols = _conv_forward(x.data, weight.data, stride, padding)
    if bias is not None:
        out += bias.data.reshape(1, k, 1, 1)

    x_shape, w_shape = x.shape, weight.shape
    wd = weight.data

    def bwd(g):
        dx = _conv_dx(g, wd, x_shape, stride, padding) if x.requires_grad else None
        dw = _conv_dw(cols, g, w_shape) if weight.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if (bias is not None and bias.requires_grad) else None
        return (dx, dw) if bias is None else (dx, dw, db)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, bwd)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                      stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of ``conv2d`` as a forward op: (N,K,H,W) -> (N,C,H',W').

    ``weight`` keeps the conv layout (K,C,kh,kw); the op maps K channels back
    to C with H' = (H-1)*stride - 2*padding + kh.
    """
    _require_nchw(x, "transposed_conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"transposed_conv2d: expected 4-d K,C,kh,kw weight, got {weight.shape}")
    n, k, h, w_ = x.shape
    kw_, c, kh, kwid = weight.shape
    if kw_ != k:
        raise ShapeError(f"transposed_conv2d: input channels {k} != weight K {kw_}")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w_ - 1) * stride - 2 * padding + kwid
    if ho < 1 or wo < 1:
        raise ShapeError(f"transposed_conv2d: output size {ho}x{wo} not positive")
    if bias is not None and bias.shape != (c,):
        raise ShapeError(f"transposed_conv2d: bias shape {bias.shape} != ({c},)")

    out_shape = (n, c, ho, wo)
    wd = weight.data
    out = _conv_dx(x.data, wd, out_shape, stride, padding)
    if bias is not None:
        out = out + bias.data.reshape(1, c, 1, 1)

    def bwd(g):
        dx = None
        dw = None
        if x.requires_grad or weight.requires_grad:
            cols, _, _ = _im2col(g, kh, kwid, stride, padding)
            if x.requires_grad:
                dx = np.matmul(wd.reshape(k, -1), cols).reshape(x.shape)
            if weight.requires_grad:
                dw = _conv_dw(cols, x.data, weight.shape)
        db = g.sum(axis=(0, 2, 3)) if (bias is not None and bias.requires_grad) else None
        return (dx, dw) if bias is None else (dx, dw, db)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, bwd)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k block mean over the last two axes."""
    _require_nchw(x, "avg_pool2d")
    n, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial size {h}x{w} not divisible by k={k}")
    ho, wo = h // k, w // k
    out = x.data.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))

    def bwd(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None], (n, c, ho, k, wo, k)) / (k * k)
        return (gx.reshape(n, c, h, w),)

    return _make(out, (x,), bwd)


def _resize_coeffs(n_src: int, n_dst: int):
    """align-corners sample positions: lower index, upper index, upper weight."""
    if n_dst == 1:
        pos = np.zeros(1)
    elif n_src == 1:
        pos = np.zeros(n_dst)
    else:
        pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
    lo = np.floor(pos).astype(np.int64)
    lo = np.minimum(lo, n_src - 1)
    hi = np.minimum(lo + 1, n_src - 1)
    w = pos - lo
    return lo, hi, w


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resample of the last two axes (align-corners convention).

    Resizing to the source size is the identity, and a bilinear ramp
    survives an up/down round trip exactly.
    """
    if x.ndim < 2:
        raise ShapeError(f"bilinear_resize: need at least 2 dims, got shape {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: target size {out_h}x{out_w} not positive")
    h, w = x.shape[-2], x.shape[-1]
    if (out_h, out_w) == (h, w):
        def bwd_id(g):
            return (g,)
        return _make(x.data.copy(), (x,), bwd_id)

    ylo, yhi, wy = _resize_coeffs(h, out_h)
    xlo, xhi, wx = _resize_coeffs(w, out_w)
    dt = x.data.dtype
    wy = wy.astype(dt)
    wx = wx.astype(dt)

    d = x.data
    rows = d[..., ylo, :] * (1 - wy)[:, None] + d[..., yhi, :] * wy[:, None]
    out = rows[..., xlo] * (1 - wx) + rows[..., xhi] * wx

    in_shape = x.shape

    def bwd(g):
        # Scatter the four corner weights back; add.at handles repeated indices.
        gr = np.zeros(in_shape[:-2] + (out_h, w), dtype=g.dtype)  # grad wrt `rows`
        np.add.at(gr, (..., xlo), g * (1 - wx))
        np.add.at(gr, (..., xhi), g * wx)
        gx = np.zeros(in_shape, dtype=g.dtype)
        np.add.at(gx.swapaxes(-2, -1), (..., ylo), (gr * (1 - wy)[:, None]).swapaxes(-2, -1))
        np.add.at(gx.swapaxes(-2, -1), (..., yhi), (gr * wy[:, None]).swapaxes(-2, -1))
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), bwd)
