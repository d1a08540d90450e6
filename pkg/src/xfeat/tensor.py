"""Minimal numpy-backed tensor with reverse-mode autodiff and conv FLOP accounting.

Feature maps use N x C x H x W layout.  float32 is the production dtype;
building a graph from float64 inputs keeps everything in float64, which is
what the finite-difference gradient checks rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_grad_enabled = True


class no_grad:
    """Context manager that skips graph construction inside its scope."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")


def _unbroadcast(grad, shape):
    """Sum-reduce `grad` back to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


@dataclass
class FlopEntry:
    name: str
    h: int
    w: int
    c_in: int
    c_out: int
    k: int

    @property
    def f_ops(self) -> int:
        return self.h * self.w * self.c_in * self.c_out * self.k * self.k


class FlopCounter:
    """Per-layer floating point operation ledger for convolutions.

    Each conv contributes H_out * W_out * C_in * C_out * k^2 operations
    (counted per output position; bias adds excluded).  All arithmetic is
    integer-exact.
    """

    def __init__(self):
        self.per_layer: list[FlopEntry] = []

    def add(self, name, h, w, c_in, c_out, k):
        self.per_layer.append(FlopEntry(name, int(h), int(w), int(c_in), int(c_out), int(k)))

    @property
    def total(self) -> int:
        return sum(e.f_ops for e in self.per_layer)

    def rows(self):
        return [(e.name, e.h, e.w, e.c_in, e.c_out, e.k, e.f_ops) for e in self.per_layer]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "_op")

    def __init__(self, data, requires_grad=False, _prev=(), _op="leaf"):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = _prev
        self._op = _op

    # ------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self._op})"

    def item(self):
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, cut out of the graph (gradients stop here)."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # ------------------------------------------------------------------
    @staticmethod
    def _make(data, op, prev, backward):
        _check_finite(data, op)
        if _grad_enabled and any(p.requires_grad for p in prev):
            out = Tensor(data, requires_grad=True, _prev=tuple(prev), _op=op)
            out._backward = backward
            return out
        return Tensor(data, _op=op)

    def _accum(self, grad):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._prev:
                visit(p)
            topo.append(t)

        visit(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    # -- elementwise arithmetic ----------------------------------------
    @staticmethod
    def _coerce(x):
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bw(g):
            a._accum(_unbroadcast(g, a.data.shape))
            b._accum(_unbroadcast(g, b.data.shape))

        return Tensor._make(a.data + b.data, "add", (a, b), bw)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._make(-a.data, "neg", (a,), lambda g: a._accum(-g))

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bw(g):
            a._accum(_unbroadcast(g * b.data, a.data.shape))
            b._accum(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._make(a.data * b.data, "mul", (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bw(g):
            a._accum(_unbroadcast(g / b.data, a.data.shape))
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._make(a.data / b.data, "div", (a, b), bw)

    def __pow__(self, p):
        a = self
        return Tensor._make(
            a.data ** p, "pow", (a,), lambda g: a._accum(g * p * a.data ** (p - 1))
        )

    # -- shape ops ------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape
        return Tensor._make(
            a.data.reshape(shape), "reshape", (a,), lambda g: a._accum(g.reshape(old))
        )

    def transpose(self, axes):
        a = self
        inv = np.argsort(axes)
        return Tensor._make(
            a.data.transpose(axes), "transpose", (a,), lambda g: a._accum(g.transpose(inv))
        )

    @property
    def T(self):
        return self.transpose((1, 0))

    def crop2d(self, h, w):
        """Slice an N x C x H x W map down to the first h rows / w cols."""
        a = self
        full = a.data.shape

        def bw(g):
            buf = np.zeros(full, dtype=g.dtype)
            buf[:, :, :h, :w] = g
            a._accum(buf)

        return Tensor._make(a.data[:, :, :h, :w], "crop2d", (a,), bw)

    # -- reductions -----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        a = self

        def bw(g):
            if axis is None:
                a._accum(np.broadcast_to(g, a.data.shape).astype(a.data.dtype))
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis, keepdims=False):
        a = self
        idx = np.argmax(a.data, axis=axis)
        out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
        if not keepdims:
            out = np.squeeze(out, axis=axis)

        def bw(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            buf = np.zeros_like(a.data)
            np.put_along_axis(buf, np.expand_dims(idx, axis), g, axis=axis)
            a._accum(buf)

        return Tensor._make(out, "max", (a,), bw)

    # -- pointwise nonlinearities ---------------------------------------
    def exp(self):
        a = self
        out_data = np.exp(a.data)
        return Tensor._make(out_data, "exp", (a,), lambda g: a._accum(g * out_data))

    def log(self):
        a = self
        return Tensor._make(np.log(a.data), "log", (a,), lambda g: a._accum(g / a.data))

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)
        return Tensor._make(out_data, "sqrt", (a,), lambda g: a._accum(g / (2.0 * out_data)))

    def abs(self):
        a = self
        return Tensor._make(np.abs(a.data), "abs", (a,), lambda g: a._accum(g * np.sign(a.data)))

    def relu(self):
        a = self
        mask = a.data > 0
        return Tensor._make(a.data * mask, "relu", (a,), lambda g: a._accum(g * mask))

    def sigmoid(self):
        a = self
        with np.errstate(over="ignore"):
            s = 1.0 / (1.0 + np.exp(-a.data))
        return Tensor._make(s, "sigmoid", (a,), lambda g: a._accum(g * s * (1.0 - s)))

    # -- softmax family -------------------------------------------------
    def log_softmax(self, axis=-1):
        a = self
        m = a.data.max(axis=axis, keepdims=True)
        z = a.data - m
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        out_data = z - lse

        def bw(g):
            a._accum(g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

        return Tensor._make(out_data, "log_softmax", (a,), bw)

    def softmax(self, axis=-1):
        a = self
        m = a.data.max(axis=axis, keepdims=True)
        e = np.exp(a.data - m)
        s = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            a._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))

        return Tensor._make(s, "softmax", (a,), bw)

    # -- linear algebra -------------------------------------------------
    def matmul(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bw(g):
            a._accum(g @ b.data.T)
            b._accum(a.data.T @ g)

        return Tensor._make(a.data @ b.data, "matmul", (a, b), bw)

    __matmul__ = matmul

    def diag(self):
        a = self
        n = a.data.shape[0]

        def bw(g):
            buf = np.zeros_like(a.data)
            buf[np.arange(n), np.arange(n)] = g
            a._accum(buf)

        return Tensor._make(np.diagonal(a.data).copy(), "diag", (a,), bw)

    def gather_rows(self, idx):
        """Select rows of a 2-D tensor; duplicate indices accumulate grads."""
        a = self
        idx = np.asarray(idx, dtype=np.int64)

        def bw(g):
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a._accum(buf)

        return Tensor._make(a.data[idx], "gather_rows", (a,), bw)

    def gather_cols(self, idx):
        """Pick element idx[i] from row i of a 2-D tensor."""
        a = self
        idx = np.asarray(idx, dtype=np.int64)
        rows = np.arange(a.data.shape[0])

        def bw(g):
            buf = np.zeros_like(a.data)
            np.add.at(buf, (rows, idx), g)
            a._accum(buf)

        return Tensor._make(a.data[rows, idx], "gather_cols", (a,), bw)

    def l2_normalize(self, axis=-1, eps=1e-12):
        norm = ((self * self).sum(axis=axis, keepdims=True) + eps).sqrt()
        return self / norm


def concat(tensors, axis=0):
    tensors = [Tensor._coerce(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accum(piece)

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, bw)


# ----------------------------------------------------------------------
# Structured ops on N x C x H x W maps
# ----------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0,
           counter: FlopCounter | None = None, name="conv") -> Tensor:
    """2-D convolution (cross-correlation), k in {1,3}, stride in {1,2}.

    When a FlopCounter is given, one entry of H'·W'·C_in·C_out·k² is recorded.
    """
    n, c, h, wdt = x.data.shape
    c_out, c_in, k, k2 = w.data.shape
    if k != k2 or k not in (1, 3):
        raise ValueError(f"unsupported kernel {k}x{k2}")
    if stride not in (1, 2):
        raise ValueError(f"unsupported stride {stride}")
    if c_in != c:
        raise ValueError(f"channel mismatch: input {c}, weight {c_in}")
    if padding != (k - 1) // 2:
        raise ValueError("padding must equal (k-1)/2")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1

    cols = np.empty((n, c, k, k, ho, wo), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    out = np.tensordot(w.data, cols, axes=([1, 2, 3], [1, 2, 3]))  # (Cout, N, Ho, Wo)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if b is not None:
        out = out + b.data.reshape(1, c_out, 1, 1)

    if counter is not None:
        counter.add(name, ho, wo, c_in, c_out, k)

    prev = (x, w) if b is None else (x, w, b)

    def bw(g):
        w._accum(np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5])))
        if b is not None:
            b._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.tensordot(g, w.data, axes=([1], [0]))  # (N, Ho, Wo, C, k, k)
            dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            x._accum(dxp[:, :, padding:padding + h, padding:padding + wdt] if padding else dxp)

    return Tensor._make(out, "conv2d", prev, bw)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean, running_var,
                training=False, momentum=0.1, eps=1e-5) -> Tensor:
    """Channel-wise batch normalization on N x C x H x W.

    Training mode normalizes with batch moments and updates the running
    buffers in place (numpy arrays, not part of the graph).
    """
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError("batchnorm parameter length must equal channel count")
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        cnt = n * h * w
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * (var * cnt / max(cnt - 1, 1))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = g4 * xhat + b4

        def bw(grad):
            gamma._accum((grad * xhat).sum(axis=(0, 2, 3)))
            beta._accum(grad.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gh = grad * g4  # dL/dxhat
                m1 = gh.mean(axis=(0, 2, 3), keepdims=True)
                m2 = (gh * xhat).mean(axis=(0, 2, 3), keepdims=True)
                x._accum(inv.reshape(1, c, 1, 1) * (gh - m1 - xhat * m2))

        return Tensor._make(out, "batchnorm2d", (x, gamma, beta), bw)

    inv = 1.0 / np.sqrt(running_var + eps)
    scale = (gamma.data * inv).reshape(1, c, 1, 1)
    shift = (beta.data - gamma.data * running_mean * inv).reshape(1, c, 1, 1)
    xhat_mean = running_mean.reshape(1, c, 1, 1)

    def bw(grad):
        xh = (x.data - xhat_mean) * inv.reshape(1, c, 1, 1)
        gamma._accum((grad * xh).sum(axis=(0, 2, 3)))
        beta._accum(grad.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            x._accum(grad * scale)

    return Tensor._make(x.data * scale + shift, "batchnorm2d", (x, gamma, beta), bw)


def _bilinear_weights(size_in, size_out):
    """Half-pixel-center source indices and weights for 1-D resize."""
    scale = size_in / size_out
    src = (np.arange(size_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, size_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, size_in - 1)
    i1 = np.minimum(i0 + 1, size_in - 1)
    w1 = src - i0
    return i0, i1, w1


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize N x C x H x W with half-pixel-center bilinear sampling."""
    n, c, h, w = x.data.shape
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    y0, y1, wy = _bilinear_weights(h, out_h)
    x0, x1, wx = _bilinear_weights(w, out_w)
    wy = wy.reshape(-1, 1).astype(x.data.dtype)
    wx = wx.reshape(1, -1).astype(x.data.dtype)

    a00 = x.data[:, :, y0[:, None], x0[None, :]]
    a01 = x.data[:, :, y0[:, None], x1[None, :]]
    a10 = x.data[:, :, y1[:, None], x0[None, :]]
    a11 = x.data[:, :, y1[:, None], x1[None, :]]
    out = (a00 * (1 - wy) * (1 - wx) + a01 * (1 - wy) * wx
           + a10 * wy * (1 - wx) + a11 * wy * wx)

    def bw(g):
        buf = np.zeros_like(x.data)
        for yi, wyi in ((y0, 1 - wy), (y1, wy)):
            for xi, wxi in ((x0, 1 - wx), (x1, wx)):
                np.add.at(buf, (slice(None), slice(None), yi[:, None], xi[None, :]), g * wyi * wxi)
        x._accum(buf)

    return Tensor._make(out, "bilinear_resize", (x,), bw)


def _cubic_kernel(d, a=-0.5):
    d = np.abs(d)
    d2, d3 = d * d, d * d * d
    out = np.where(d <= 1.0, (a + 2) * d3 - (a + 3) * d2 + 1.0,
                   np.where(d < 2.0, a * d3 - 5 * a * d2 + 8 * a * d - 4 * a, 0.0))
    return out


def bicubic_sample(feat_map, points) -> np.ndarray:
    """Sample a C x h x w map at continuous (u, v) points.

    Catmull-Rom kernel (a = -0.5), half-pixel centers, replicate border.
    Sampling exactly at a cell center returns the stored value.  Returns a
    plain (len(points), C) array; this path carries no gradients.
    """
    data = feat_map.data if isinstance(feat_map, Tensor) else np.asarray(feat_map)
    c, h, w = data.shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        return np.zeros((0, c), dtype=data.dtype)
    u = pts[:, 0] - 0.5
    v = pts[:, 1] - 0.5
    iu = np.floor(u).astype(np.int64)
    iv = np.floor(v).astype(np.int64)
    fu = u - iu
    fv = v - iv

    out = np.zeros((pts.shape[0], c), dtype=np.float64)
    for dy in range(-1, 3):
        wy = _cubic_kernel(dy - fv)
        yy = np.clip(iv + dy, 0, h - 1)
        row_acc = np.zeros_like(out)
        for dx in range(-1, 3):
            wx = _cubic_kernel(dx - fu)
            xx = np.clip(iu + dx, 0, w - 1)
            row_acc += wx[:, None] * data[:, yy, xx].T
        out += wy[:, None] * row_acc
    return out.astype(data.dtype)


def space_to_depth(x: Tensor, block=8) -> Tensor:
    """Rearrange N x 1 x H x W into N x block² x H/b x W/b.

    Output channel c of cell (i, j) holds input pixel (b*i + c//b, b*j + c%b).
    """
    n, c, h, w = x.shape
    if c != 1:
        raise ValueError("space_to_depth expects a single input channel")
    if h % block or w % block:
        raise ValueError(f"dims ({h},{w}) not divisible by block {block}")
    t = x.reshape(n, h // block, block, w // block, block)
    t = t.transpose((0, 2, 4, 1, 3))
    return t.reshape(n, block * block, h // block, w // block)


def depth_to_space(x: Tensor, block=8) -> Tensor:
    """Exact inverse of :func:`space_to_depth`."""
    n, c, h, w = x.shape
    if c != block * block:
        raise ValueError(f"expected {block * block} channels, got {c}")
    t = x.reshape(n, block, block, h, w)
    t = t.transpose((0, 3, 1, 4, 2))
    return t.reshape(n, 1, h * block, w * block)


def pad_to_multiple(img: np.ndarray, multiple: int) -> np.ndarray:
    """Edge-replicate pad the last two axes up to the next multiple."""
    h, w = img.shape[-2], img.shape[-1]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return img
    pad = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(img, pad, mode="edge")
