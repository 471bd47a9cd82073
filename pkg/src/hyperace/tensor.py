"""Dense float tensors with reverse-mode automatic differentiation.

Feature maps use NCHW layout and 64-bit floats by default (a 32-bit mode is
available for inference; every verification path runs in 64-bit). Ops record
onto the thread-local active ``Tape``; replaying the tape in reverse
accumulates gradients into ``.grad`` buffers.

FLOP accounting convention (used by the instrumented ``FlopTally`` and
mirrored by the closed-form profiler): FLOPs = 2 x multiply-accumulates for
conv2d/matmul; elementwise ops, batch norm, softmax, pooling, reductions and
resizes count 1 FLOP per output element; concat/split/reshape/transpose are
free.
"""

import threading

import numpy as np

from .errors import ShapeError

_STATE = threading.local()


def _tape():
    return getattr(_STATE, "tape", None)


def _count(flops):
    tally = getattr(_STATE, "tally", None)
    if tally is not None:
        tally.flops += int(flops)


class FlopTally:
    """Instrumented FLOP counter: every op executed inside the context adds
    its cost. Used to cross-check the closed-form budget counter."""

    def __init__(self):
        self.flops = 0

    def __enter__(self):
        self._prev = getattr(_STATE, "tally", None)
        _STATE.tally = self
        return self

    def __exit__(self, *exc):
        _STATE.tally = self._prev
        return False


class Tape:
    """Ordered record of executed ops, sufficient to run reverse-mode
    accumulation. Reverse execution order is a valid topological order, so
    the backward pass is a single reversed replay. One tape per
    forward/backward execution context."""

    def __init__(self):
        self._records = []  # (out, inputs, backward_fn)

    def __enter__(self):
        self._prev = getattr(_STATE, "tape", None)
        _STATE.tape = self
        return self

    def __exit__(self, *exc):
        _STATE.tape = self._prev
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, output):
        """Accumulate d(output)/d(leaf) into .grad for every recorded tensor
        that requires grad. Each use of a tensor contributes exactly once."""
        if output.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar output, got shape {output.shape}"
            )
        grads = {id(output): np.ones_like(output.data)}
        holders = {id(output): output}
        for out, inputs, bwd in reversed(self._records):
            gout = grads.pop(id(out), None)
            if gout is None:
                continue
            if out.requires_grad:
                out.grad = gout if out.grad is None else out.grad + gout
            gins = bwd(gout)
            for tensor, gin in zip(inputs, gins):
                if gin is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                holders[key] = tensor
                if key in grads:
                    grads[key] = grads[key] + gin
                else:
                    grads[key] = gin
        for key, g in grads.items():
            tensor = holders[key]
            if tensor.requires_grad:
                tensor.grad = g if tensor.grad is None else tensor.grad + g


class Tensor:
    """Dense N-dimensional float array, optionally tracked for gradients.

    Immutable after creation except for the ``grad`` buffer.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False, dtype=np.float64):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

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

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self._tape is None:
            raise ShapeError("tensor was not recorded on a tape")
        self._tape.backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars and ndarrays become constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, Tensor(1.0 / other))
        raise TypeError("tensor division only supports python scalars")

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _make(data, inputs, bwd):
    """Wrap op output; record on the active tape when gradients are needed."""
    out = Tensor(data)
    tape = _tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._records.append((out, tuple(inputs), bwd))
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b):
    out = a.data + b.data
    _count(out.size)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd)


def sub(a, b):
    out = a.data - b.data
    _count(out.size)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bwd)


def mul(a, b):
    out = a.data * b.data
    _count(out.size)

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bwd)


def neg(a):
    _count(a.size)
    return _make(-a.data, (a,), lambda g: (-g,))


def absolute(a):
    out = np.abs(a.data)
    _count(out.size)
    sign = np.sign(a.data)

    def bwd(g):
        return (g * sign,)

    return _make(out, (a,), bwd)


def sigmoid(a):
    out = _sigmoid(a.data)
    _count(out.size)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), bwd)


def silu(a):
    s = _sigmoid(a.data)
    out = a.data * s
    _count(out.size)

    def bwd(g):
        return (g * (s * (1.0 + a.data * (1.0 - s))),)

    return _make(out, (a,), bwd)


def _sigmoid(x):
    # piecewise form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out)
    _count(out.size)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _make(out, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    _count(out.size)
    n = a.size if axis is None else a.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / n, a.shape).copy(),)

    return _make(out, (a,), bwd)


def amax(a, axis, keepdims=False):
    """Maximum along one axis; gradient routes to the first argmax."""
    out = np.asarray(a.data.max(axis=axis, keepdims=keepdims))
    _count(out.size)
    idx = np.argmax(a.data, axis=axis)

    def bwd(g):
        gx = np.zeros_like(a.data)
        g2 = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), g2, axis=axis)
        return (gx,)

    return _make(out, (a,), bwd)


def softmax(a, axis):
    """Numerically stabilized softmax along `axis`; outputs sum to 1 there."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    _count(out.size)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), bwd)


def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy on raw logits against constant
    targets in [0,1]. Stable for any logit magnitude."""
    t = np.asarray(targets, dtype=np.float64)
    x = logits.data
    # log(1 + exp(-|x|)) + max(x, 0) - x*t
    out = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0) - x * t
    _count(out.size)
    s = _sigmoid(x)

    def bwd(g):
        return (g * (s - t),)

    return _make(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# structural ops (zero FLOPs)


def reshape(a, shape):
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), bwd)


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _make(out, (a,), bwd)


def concat(tensors, axis):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, bwd)


def narrow(a, axis, start, length):
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index]

    def bwd(g):
        gx = np.zeros_like(a.data)
        gx[index] = g
        return (gx,)

    return _make(out, (a,), bwd)


def split(a, sizes, axis):
    """Split along `axis` into chunks of the given sizes (must sum to the
    axis extent)."""
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(
            f"split sizes {list(sizes)} do not sum to axis extent {a.shape[axis]}"
        )
    pieces = []
    start = 0
    for size in sizes:
        pieces.append(narrow(a, axis, start, size))
        start += size
    return pieces


# ---------------------------------------------------------------------------
# matmul / convolution


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner extents differ: {a.shape[1]} (a) vs {b.shape[0]} (b)"
        )
    out = a.data @ b.data
    _count(2 * a.shape[0] * a.shape[1] * b.shape[1])

    def bwd(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bwd)


def _conv_out_extent(extent, k, stride, padding):
    return (extent + 2 * padding - k) // stride + 1


def _im2col(x, k, stride, ho, wo, padding):
    n, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride,
                                  j : j + stride * wo : stride]
    return cols


def _col2im(gcols, xshape, k, stride, ho, wo, padding):
    n, c, h, w = xshape
    gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + stride * ho : stride,
                j : j + stride * wo : stride] += gcols[:, :, i, j]
    if padding:
        return gxp[:, :, padding:-padding, padding:-padding]
    return gxp


def conv2d(x, w, bias=None, stride=1, padding=None, groups=1):
    """2-d cross-correlation over an NCHW input.

    `w` has shape (c_out, c_in/groups, k, k); groups == c_in with
    c_out == c_in is a depthwise convolution. `padding` defaults to k//2.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d NCHW, got {x.shape}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d weight must be (c_out, c_in/g, k, k), got {w.shape}")
    n, c, h, wid = x.shape
    c_out, c_in_g, k, _ = w.shape
    if padding is None:
        padding = k // 2
    if c_in_g * groups != c:
        raise ShapeError(
            f"conv2d channel mismatch: input has {c} channels but weight expects "
            f"{c_in_g} x groups {groups} = {c_in_g * groups}"
        )
    if c_out % groups:
        raise ShapeError(f"conv2d c_out {c_out} not divisible by groups {groups}")
    if k > h + 2 * padding or k > wid + 2 * padding:
        raise ShapeError(
            f"conv2d kernel {k} exceeds padded input {h + 2 * padding}x{wid + 2 * padding}"
        )
    ho = _conv_out_extent(h, k, stride, padding)
    wo = _conv_out_extent(wid, k, stride, padding)
    og = c_out // groups
    length = ho * wo

    if k == 1 and padding == 0:
        cols = x.data[:, :, ::stride, ::stride].reshape(n, groups, c_in_g, length)
    else:
        cols = _im2col(x.data, k, stride, ho, wo, padding)
        cols = cols.reshape(n, groups, c_in_g * k * k, length)
    w2 = w.data.reshape(groups, og, c_in_g * k * k)
    out = np.matmul(w2[None], cols)  # (n, groups, og, length)
    out = out.reshape(n, c_out, ho, wo)
    flops = 2 * n * c_out * c_in_g * k * k * length
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)
        flops += n * c_out * length
    _count(flops)

    inputs = (x, w) if bias is None else (x, w, bias)

    def bwd(g):
        g2 = g.reshape(n, groups, og, length)
        gw = gx = gb = None
        if w.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 1, 3, 2)).sum(axis=0)
            gw = gw.reshape(w.shape)
        if x.requires_grad:
            gcols = np.matmul(w2.transpose(0, 2, 1)[None], g2)
            if k == 1 and padding == 0:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride] = gcols.reshape(n, c, ho, wo)
            else:
                gcols = gcols.reshape(n, c, k, k, ho, wo)
                gx = _col2im(gcols, x.shape, k, stride, ho, wo, padding)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(out, inputs, bwd)


# ---------------------------------------------------------------------------
# normalization / pooling / resizing


def batchnorm(x, scale, shift, mean, var, eps=1e-5):
    """Inference-form batch normalization with stored per-channel statistics."""
    if x.ndim != 4:
        raise ShapeError(f"batchnorm input must be 4-d NCHW, got {x.shape}")
    inv = 1.0 / np.sqrt(var.data + eps)
    xhat = (x.data - mean.data.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    out = scale.data.reshape(1, -1, 1, 1) * xhat + shift.data.reshape(1, -1, 1, 1)
    _count(out.size)

    def bwd(g):
        gx = gscale = gshift = None
        if x.requires_grad:
            gx = g * (scale.data * inv).reshape(1, -1, 1, 1)
        if scale.requires_grad:
            gscale = (g * xhat).sum(axis=(0, 2, 3))
        if shift.requires_grad:
            gshift = g.sum(axis=(0, 2, 3))
        return gx, gscale, gshift, None, None

    return _make(out, (x, scale, shift, mean, var), bwd)


def batchnorm_train(x, scale, shift, eps=1e-5):
    """Training-form batch normalization over the (N, H, W) extent.

    Returns (output, batch_mean, batch_var); the statistics are plain arrays
    for the caller to fold into running buffers.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm input must be 4-d NCHW, got {x.shape}")
    m = x.data.mean(axis=(0, 2, 3))
    v = x.data.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - m.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    out = scale.data.reshape(1, -1, 1, 1) * xhat + shift.data.reshape(1, -1, 1, 1)
    _count(out.size)
    count = x.shape[0] * x.shape[2] * x.shape[3]

    def bwd(g):
        gx = gscale = gshift = None
        if scale.requires_grad:
            gscale = (g * xhat).sum(axis=(0, 2, 3))
        if shift.requires_grad:
            gshift = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxhat = g * scale.data.reshape(1, -1, 1, 1)
            s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (inv.reshape(1, -1, 1, 1) / count) * (
                count * gxhat - s1 - xhat * s2
            )
        return gx, gscale, gshift

    return _make(out, (x, scale, shift), bwd), m, v


def global_avg_pool(x):
    """(N, C, H, W) -> (N, C) spatial mean."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be 4-d, got {x.shape}")
    out = x.data.mean(axis=(2, 3))
    _count(out.size)
    n, c, h, w = x.shape

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _make(out, (x,), bwd)


def global_max_pool(x):
    """(N, C, H, W) -> (N, C) spatial maximum; gradient to the first argmax."""
    if x.ndim != 4:
        raise ShapeError(f"global_max_pool input must be 4-d, got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]
    _count(out.size)

    def bwd(g):
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, idx[:, :, None], g[:, :, None], axis=2)
        return (gx.reshape(x.shape),)

    return _make(out, (x,), bwd)


def resize(x, size, mode=None):
    """Resize an NCHW map to `size` (h, w) by an integer factor.

    Upsampling uses nearest-neighbor, downsampling area averaging; `mode`
    ("nearest"/"area") can force the direction-appropriate kernel explicitly.
    Same-size resizes are the identity.
    """
    if x.ndim != 4:
        raise ShapeError(f"resize input must be 4-d, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    th, tw = size
    if (th, tw) == (h, w):
        return x
    if th > h:
        if mode not in (None, "nearest"):
            raise ShapeError(f"upsampling requires nearest mode, got {mode!r}")
        if th % h or tw % w or th // h != tw // w:
            raise ShapeError(f"resize {h}x{w} -> {th}x{tw} is not an integer scale")
        return _resize_nearest_up(x, th // h)
    if mode not in (None, "area"):
        raise ShapeError(f"downsampling requires area mode, got {mode!r}")
    if h % th or w % tw or h // th != w // tw:
        raise ShapeError(f"resize {h}x{w} -> {th}x{tw} is not an integer scale")
    return _resize_area_down(x, h // th)


def _resize_nearest_up(x, factor):
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    _count(out.size)
    n, c, h, w = x.shape

    def bwd(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), bwd)


def _resize_area_down(x, factor):
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // factor, factor, w // factor, factor).mean(
        axis=(3, 5)
    )
    _count(out.size)

    def bwd(g):
        gx = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
        return (gx / (factor * factor),)

    return _make(out, (x,), bwd)
