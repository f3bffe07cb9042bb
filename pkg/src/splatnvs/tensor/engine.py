"""Minimal reverse-mode autodiff over dense numpy buffers.

A single global tape records every op executed while grad recording is
enabled. ``backward(loss)`` walks the tape once in reverse, accumulates
vector-Jacobian products into ``Tensor.grad`` and consumes the tape.
f32 is the training dtype; f64 exists for finite-difference checking.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "tensor", "no_grad", "backward", "reset_tape", "tape_size"]


class _TapeState:
    def __init__(self):
        self.ops: list[Op] = []
        self.recording = True


_STATE = _TapeState()


def reset_tape():
    _STATE.ops.clear()


def tape_size() -> int:
    return len(_STATE.ops)


class no_grad:
    """Context manager: ops executed inside are not recorded."""

    def __enter__(self):
        self._prev = _STATE.recording
        _STATE.recording = False
        return self

    def __exit__(self, *exc):
        _STATE.recording = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_op", "_consumed")

    def __init__(self, data, requires_grad=False):
        self._consumed = False
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._op: Op | None = None

    # -- introspection ----------------------------------------------------
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
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- arithmetic sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return pow_(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce operands to Tensors; scalars adopt the other operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = _as_tensor(a), _as_tensor(b)
    return a, b


class Op:
    """One recorded operation: holds input refs and a VJP closure."""

    __slots__ = ("inputs", "out", "_vjp")

    def __init__(self, inputs, out_data, vjp):
        self.inputs = inputs
        self._vjp = vjp
        out = Tensor(out_data)
        out.requires_grad = any(t.requires_grad for t in inputs)
        if out.requires_grad and _STATE.recording:
            out._op = self
            _STATE.ops.append(self)
        self.out = out

    def vjp(self, g):
        return self._vjp(g)


def _record(inputs, out_data, vjp) -> Tensor:
    return Op(tuple(inputs), out_data, vjp).out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise binary ----------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    out = a.data + b.data
    return _record([a, b], out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    out = a.data - b.data
    return _record([a, b], out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    out = a.data * b.data
    return _record([a, b], out,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data
    return _record([a, b], out,
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def pow_(a, p: float):
    a = _as_tensor(a)
    out = a.data ** p
    return _record([a], out, lambda g: (g * p * a.data ** (p - 1),))


def matmul(a, b):
    a, b = _pair(a, b)
    out = a.data @ b.data
    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _record([a, b], out, vjp)


# -- elementwise unary -----------------------------------------------------

def relu(x):
    x = _as_tensor(x)
    out = np.maximum(x.data, 0)
    return _record([x], out, lambda g: (g * (x.data > 0),))


def sigmoid(x):
    x = _as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-np.clip(x.data, -60, 60)))
    return _record([x], out, lambda g: (g * out * (1 - out),))


def tanh(x):
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _record([x], out, lambda g: (g * (1 - out * out),))


def softplus(x):
    x = _as_tensor(x)
    out = np.logaddexp(0.0, x.data)  # overflow-safe log(1+e^x)
    sig = 1.0 / (1.0 + np.exp(-np.clip(x.data, -60, 60)))
    return _record([x], out, lambda g: (g * sig,))


def exp(x):
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _record([x], out, lambda g: (g * out,))


def log(x):
    x = _as_tensor(x)
    out = np.log(x.data)
    return _record([x], out, lambda g: (g / x.data,))


def sqrt(x):
    x = _as_tensor(x)
    out = np.sqrt(x.data)
    return _record([x], out, lambda g: (g * 0.5 / out,))


def abs_(x):
    x = _as_tensor(x)
    out = np.abs(x.data)
    return _record([x], out, lambda g: (g * np.sign(x.data),))


def clamp(x, lo=None, hi=None):
    x = _as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = np.ones_like(x.data, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi
    return _record([x], out, lambda g: (g * inside,))


# -- reductions / shape ----------------------------------------------------

def sum_(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _record([x], out, vjp)


def mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    denom = x.size / out.size
    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / denom,)
    return _record([x], out, vjp)


def reshape(x, shape):
    x = _as_tensor(x)
    out = x.data.reshape(shape)
    return _record([x], out, lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    x = _as_tensor(x)
    out = x.data.transpose(axes)
    inv = np.argsort(axes)
    return _record([x], out, lambda g: (g.transpose(inv),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record(tensors, out, lambda g: tuple(np.split(g, splits, axis=axis)))


def getitem(x, idx):
    x = _as_tensor(x)
    out = x.data[idx]
    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)
    return _record([x], out, vjp)


def gather_rows(x, idx):
    """Select rows along axis 0 by an integer index array (backward scatter-adds)."""
    x = _as_tensor(x)
    idx = np.asarray(idx)
    out = x.data[idx]
    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)
    return _record([x], out, vjp)


def pad2d(x, pad):
    """Zero-pad the last two axes by `pad` on each side."""
    x = _as_tensor(x)
    spec = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(x.data, spec)
    sl = tuple([slice(None)] * (x.ndim - 2) + [slice(pad, -pad or None)] * 2)
    return _record([x], out, lambda g: (g[sl],))


def softmax(x, axis):
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for ndim {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)
    return _record([x], out, vjp)


def stack(tensors, axis=0):
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# -- structured ops --------------------------------------------------------

def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride]
    return cols, ho, wo


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation, NCHW layout. H' = (H + 2p - kH)//stride + 1."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be 4-d NCHW, got shape {x.shape}")
    if w.ndim != 4:
        raise ValueError(f"conv2d weight must be 4-d (Cout,Cin,kH,kW), got shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input C={x.shape[1]} vs weight Cin={w.shape[1]}")
    kh, kw = w.shape[2], w.shape[3]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ValueError(f"conv2d kernel {kh}x{kw} exceeds padded input {x.shape}")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    out = np.tensordot(w.data, cols, axes=([1, 2, 3], [1, 2, 3]))  # (Cout,N,Ho,Wo)
    out = out.transpose(1, 0, 2, 3)
    inputs = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ValueError(f"conv2d bias shape {b.shape} != (Cout,)=({w.shape[0]},)")
        out = out + b.data[None, :, None, None]
        inputs.append(b)

    n, c, h, wd = x.shape
    s = stride

    def vjp(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))  # (Cout,C,kh,kw)
        gcols = np.tensordot(g, w.data, axes=([1], [0]))  # (N,Ho,Wo,C,kh,kw)
        gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho * s:s, j:j + wo * s:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        if b is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    return _record(inputs, out, vjp)


def bilinear_upsample(x, factor: int):
    """Upsample the last two axes by an integer factor (align_corners=False)."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    f = int(factor)

    def axis_weights(size):
        o = np.arange(size * f)
        pos = (o + 0.5) / f - 0.5
        i0 = np.clip(np.floor(pos).astype(np.int64), 0, size - 1)
        i1 = np.clip(i0 + 1, 0, size - 1)
        t = np.clip(pos - np.floor(pos), 0.0, 1.0)
        t = np.where(pos < 0, 0.0, np.where(pos > size - 1, 0.0, t))
        return i0, i1, t.astype(x.dtype)

    y0, y1, ty = axis_weights(h)
    x0, x1, tx = axis_weights(w)
    ty_ = ty[None, None, :, None]
    tx_ = tx[None, None, None, :]
    top = x.data[:, :, y0][:, :, :, x0] * (1 - tx_) + x.data[:, :, y0][:, :, :, x1] * tx_
    bot = x.data[:, :, y1][:, :, :, x0] * (1 - tx_) + x.data[:, :, y1][:, :, :, x1] * tx_
    out = top * (1 - ty_) + bot * ty_

    def vjp(g):
        gx = np.zeros_like(x.data)
        for yi, wy in ((y0, 1 - ty), (y1, ty)):
            for xi, wx in ((x0, 1 - tx), (x1, tx)):
                contr = g * wy[None, None, :, None] * wx[None, None, None, :]
                np.add.at(gx, (slice(None), slice(None), yi[:, None], xi[None, :]), contr)
        return (gx,)

    return _record([x], out, vjp)


def correlation_volume(fl, fr):
    """All-pairs epipolar feature inner products, scaled by 1/sqrt(D).

    fl, fr: (B, D, H, W) -> volume (B, H, W, W); V[b,i,j,k] = <fl[:, i, j], fr[:, i, k]> / sqrt(D).
    """
    fl, fr = _as_tensor(fl), _as_tensor(fr)
    if fl.shape != fr.shape:
        raise ValueError(f"correlation feature shape mismatch: {fl.shape} vs {fr.shape}")
    d = fl.shape[1]
    s = 1.0 / np.sqrt(d)
    out = np.einsum("bdij,bdik->bijk", fl.data, fr.data, optimize=True) * s

    def vjp(g):
        gl = np.einsum("bijk,bdik->bdij", g, fr.data, optimize=True) * s
        gr = np.einsum("bijk,bdij->bdik", g, fl.data, optimize=True) * s
        return gl, gr

    return _record([fl, fr], out, vjp)


def corr_lookup(vol, disp, radius: int, level: int, sign: float = -1.0):
    """Sample a pooled correlation volume around the current disparity.

    vol: (B, H, W, Wl) pooled along its last axis by 2^level;
    disp: (B, 1, H, W) in volume-resolution pixels.
    Returns (B, 2r+1, H, W): linear interpolation at columns
    (j + sign*disp + delta) / 2^level, edge-clamped.
    """
    vol, disp = _as_tensor(vol), _as_tensor(disp)
    b, h, w, wl = vol.shape
    r = radius
    deltas = np.arange(-r, r + 1, dtype=vol.dtype)
    j = np.arange(w, dtype=vol.dtype)[None, None, :]
    base = (j + sign * disp.data[:, 0]) / (2 ** level)  # (B,H,W)
    pos = base[:, None] + deltas[None, :, None, None] / (2 ** level)  # (B,K,H,W)
    posc = np.clip(pos, 0.0, wl - 1)
    lo = np.floor(posc).astype(np.int64)
    lo = np.minimum(lo, wl - 2) if wl > 1 else lo
    hi = lo + (1 if wl > 1 else 0)
    t = (posc - lo).astype(vol.dtype)
    bi = np.arange(b)[:, None, None, None]
    ii = np.arange(h)[None, None, :, None]
    jj = np.arange(w)[None, None, None, :]
    vlo = vol.data[bi, ii, jj, lo]
    vhi = vol.data[bi, ii, jj, hi]
    out = vlo * (1 - t) + vhi * t
    inside = ((pos > 0) & (pos < wl - 1)) if wl > 1 else np.zeros_like(pos, dtype=bool)

    def vjp(g):
        gvol = np.zeros_like(vol.data)
        np.add.at(gvol, (bi, ii, jj, lo), g * (1 - t))
        np.add.at(gvol, (bi, ii, jj, hi), g * t)
        # d out / d disp = sign/2^level * (vhi - vlo), zero where clamped
        gd = (g * (vhi - vlo) * inside).sum(axis=1) * (sign / (2 ** level))
        return gvol, gd[:, None]

    return _record([vol, disp], out, vjp)


# -- backward --------------------------------------------------------------

def backward(loss: Tensor):
    """Reverse-traverse the tape from `loss`, populating .grad on inputs."""
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("tape already consumed: double backward is unsupported")
    if loss._op is None and loss.requires_grad:
        # leaf scalar: gradient of itself is 1
        loss.grad = np.ones_like(loss.data)
        return

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors_seen: dict[int, Tensor] = {id(loss): loss}
    ops = _STATE.ops
    for op in reversed(ops):
        g = grads.pop(id(op.out), None)
        if g is None:
            continue
        in_grads = op.vjp(g)
        for t, ig in zip(op.inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            ig = np.asarray(ig, dtype=t.dtype)
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
                tensors_seen[key] = t
        op.out._op = None  # consumed
        op.out._consumed = True
    for key, g in grads.items():
        t = tensors_seen[key]
        if t._op is None:  # leaf
            t.grad = g if t.grad is None else t.grad + g
    reset_tape()
