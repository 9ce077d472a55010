"""Dense float64 tensors with reverse-mode automatic differentiation.

Every layer in this package (convolutions, attention, expert MLPs, losses)
is composed from the primitives in this module.  A ``Tensor`` wraps a numpy
array; applying an operation records the input tensors and a backward
closure on the output.  ``Tensor.backward`` walks that implicit graph in
reverse topological order and accumulates ``d loss / d leaf`` into every
reachable leaf, summing over fan-out.

All arithmetic is 64-bit.  Operations that select (top-k, indexing,
``relu``/``abs`` at zero, bilinear sampling on the integer lattice) use the
subgradient of the selected branch; gradient checks must stay away from
those loci.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _nperf

from .errors import ConfigError, DimensionError, GraphError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (values only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _ensure(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _is_advanced(key) -> bool:
    if isinstance(key, (np.ndarray, list)):
        return True
    if isinstance(key, tuple):
        return any(isinstance(k, (np.ndarray, list)) for k in key)
    return False


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents: tuple = ()
        self._backward = None

    # ---- graph plumbing -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, backward) -> "Tensor":
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accum(self, g) -> None:
        if self._grad is None:
            # copy: g may be a view of, or shared with, another node's gradient
            self._grad = np.asarray(g, dtype=np.float64).copy()
        else:
            self._grad += g

    @property
    def grad(self):
        """Accumulated gradient; zeros for an untouched grad-requiring leaf."""
        if self._grad is None and self.requires_grad:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def backward(self) -> None:
        """Backpropagate from a scalar loss through the recorded graph."""
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.data.shape}")
        order = self._toposort()
        self._grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node._grad)

    def _toposort(self):
        order, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            nid = id(node)
            if nid in visited:
                continue
            visited.add(nid)
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return order

    # ---- inspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # ---- arithmetic -----------------------------------------------------

    def __add__(self, other):
        a, b = self, _ensure(other)
        data = a.data + b.data

        def backward(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape))

        return Tensor._from_op(data, (a, b), backward)

    __radd__ = __add__

    def __mul__(self, other):
        a, b = self, _ensure(other)
        data = a.data * b.data

        def backward(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._from_op(data, (a, b), backward)

    __rmul__ = __mul__

    def __neg__(self):
        a = self

        def backward(g):
            if a.requires_grad:
                a._accum(-g)

        return Tensor._from_op(-a.data, (a,), backward)

    def __sub__(self, other):
        return self + (-_ensure(other))

    def __rsub__(self, other):
        return _ensure(other) + (-self)

    def __truediv__(self, other):
        a, b = self, _ensure(other)
        data = a.data / b.data

        def backward(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._from_op(data, (a, b), backward)

    def __rtruediv__(self, other):
        return _ensure(other) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self
        data = a.data ** p

        def backward(g):
            if a.requires_grad:
                a._accum(g * p * a.data ** (p - 1))

        return Tensor._from_op(data, (a,), backward)

    def __matmul__(self, other):
        a, b = self, _ensure(other)
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(f"matmul needs 2-D+ operands, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        data = a.data @ b.data

        def backward(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

        return Tensor._from_op(data, (a, b), backward)

    # ---- shape ops ------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        data = a.data.reshape(shape)

        def backward(g):
            if a.requires_grad:
                a._accum(g.reshape(a.data.shape))

        return Tensor._from_op(data, (a,), backward)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = tuple(np.argsort(axes))
        data = a.data.transpose(axes)

        def backward(g):
            if a.requires_grad:
                a._accum(g.transpose(inv))

        return Tensor._from_op(data, (a,), backward)

    def __getitem__(self, key):
        a = self
        data = a.data[key]
        advanced = _is_advanced(key)

        def backward(g):
            if not a.requires_grad:
                return
            if a._grad is None:
                a._grad = np.zeros_like(a.data)
            if advanced:
                np.add.at(a._grad, key, g)   # sums over duplicate indices
            else:
                a._grad[key] += g

        return Tensor._from_op(data, (a,), backward)

    # ---- reductions -----------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if not a.requires_grad:
                return
            if axis is None or keepdims:
                a._accum(np.broadcast_to(g, a.data.shape))
            else:
                a._accum(np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

        return Tensor._from_op(data, (a,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        a = self
        count = a.data.size if axis is None else np.prod(
            [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
        )
        data = a.data.mean(axis=axis, keepdims=keepdims)

        def backward(g):
            if not a.requires_grad:
                return
            scaled = g / count
            if axis is None or keepdims:
                a._accum(np.broadcast_to(scaled, a.data.shape))
            else:
                a._accum(np.broadcast_to(np.expand_dims(scaled, axis), a.data.shape))

        return Tensor._from_op(data, (a,), backward)

    # ---- pointwise convenience ------------------------------------------

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return absval(self)


# ---- pointwise primitives -----------------------------------------------


def exp(x: Tensor) -> Tensor:
    x = _ensure(x)
    data = np.exp(x.data)

    def backward(g):
        if x.requires_grad:
            x._accum(g * data)

    return Tensor._from_op(data, (x,), backward)


def log(x: Tensor) -> Tensor:
    x = _ensure(x)
    data = np.log(x.data)

    def backward(g):
        if x.requires_grad:
            x._accum(g / x.data)

    return Tensor._from_op(data, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    x = _ensure(x)
    data = np.sqrt(x.data)

    def backward(g):
        if x.requires_grad:
            x._accum(g * 0.5 / data)

    return Tensor._from_op(data, (x,), backward)


def absval(x: Tensor) -> Tensor:
    x = _ensure(x)
    data = np.abs(x.data)

    def backward(g):
        if x.requires_grad:
            x._accum(g * np.sign(x.data))

    return Tensor._from_op(data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    x = _ensure(x)
    data = np.maximum(x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            x._accum(g * (x.data > 0.0))

    return Tensor._from_op(data, (x,), backward)


def clip_min(x: Tensor, lo: float) -> Tensor:
    """Elementwise max(x, lo); gradient is zero on the clipped side."""
    x = _ensure(x)
    data = np.maximum(x.data, lo)

    def backward(g):
        if x.requires_grad:
            x._accum(g * (x.data > lo))

    return Tensor._from_op(data, (x,), backward)


def erf(x: Tensor) -> Tensor:
    x = _ensure(x)
    data = _nperf(x.data)

    def backward(g):
        if x.requires_grad:
            x._accum(g * (2.0 / math.sqrt(math.pi)) * np.exp(-x.data * x.data))

    return Tensor._from_op(data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    x = _ensure(x)
    d = x.data
    data = np.where(d >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                    np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward(g):
        if x.requires_grad:
            x._accum(g * data * (1.0 - data))

    return Tensor._from_op(data, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF form: x * Phi(x), not the tanh approximation."""
    x = _ensure(x)
    d = x.data
    phi = 0.5 * (1.0 + _nperf(d * _INV_SQRT2))
    data = d * phi

    def backward(g):
        if x.requires_grad:
            dens = np.exp(-0.5 * d * d) * _INV_SQRT2PI
            x._accum(g * (phi + d * dens))

    return Tensor._from_op(data, (x,), backward)


def stop_gradient(x: Tensor) -> Tensor:
    """A constant copy of ``x`` that blocks gradient flow."""
    return Tensor(np.array(_ensure(x).data, copy=True))


# ---- composites ----------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction; shift-invariant)."""
    x = _ensure(x)
    shifted = x - x.data.max(axis=axis, keepdims=True)
    e = exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _ensure(x)
    shifted = x - x.data.max(axis=axis, keepdims=True)
    return shifted - log(exp(shifted).sum(axis=axis, keepdims=True))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if eps <= 0.0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    x, gain, bias = _ensure(x), _ensure(gain), _ensure(bias)
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(
            f"layer_norm gain/bias must have shape ({c},), got {gain.shape}/{bias.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return (xc / sqrt(var + eps)) * gain + bias


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_ensure(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        start = 0
        for t in tensors:
            n = t.data.shape[axis]
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            if t.requires_grad:
                t._accum(g[tuple(sl)])
            start += n

    return Tensor._from_op(data, tuple(tensors), backward)


def pad2d(x: Tensor, p: int) -> Tensor:
    """Zero-pad the two leading (spatial) axes of an H x W x C tensor."""
    x = _ensure(x)
    if x.ndim != 3:
        raise DimensionError(f"pad2d expects H x W x C, got {x.shape}")
    data = np.pad(x.data, ((p, p), (p, p), (0, 0)))

    def backward(g):
        if x.requires_grad:
            x._accum(g[p:-p or None, p:-p or None, :])

    return Tensor._from_op(data, (x,), backward)


def scatter_rows(rows: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """Place ``rows`` (M x C) at distinct row positions ``idx`` of an n x C zero tensor."""
    rows = _ensure(rows)
    data = np.zeros((n,) + rows.shape[1:])
    data[idx] = rows.data

    def backward(g):
        if rows.requires_grad:
            rows._accum(g[idx])

    return Tensor._from_op(data, (rows,), backward)


def bilinear_sample(x: Tensor, points) -> Tensor:
    """Sample an H x W x C map at P fractional (row, col) points.

    Out-of-bounds neighbours contribute zero (zero padding).  The result is
    differentiable with respect to both the map values and the coordinates;
    the coordinate derivative has kinks on the integer lattice.
    """
    x = _ensure(x)
    points = _ensure(points)
    if x.ndim != 3:
        raise DimensionError(f"bilinear_sample expects H x W x C input, got {x.shape}")
    if points.ndim != 2 or points.shape[1] != 2:
        raise DimensionError(f"points must be P x 2, got {points.shape}")
    H, W, C = x.shape
    pi, pj = points.data[:, 0], points.data[:, 1]
    i0 = np.floor(pi).astype(np.int64)
    j0 = np.floor(pj).astype(np.int64)
    di = (pi - i0)[:, None]
    dj = (pj - j0)[:, None]

    def corner(ii, jj):
        # clamp for the gather, zero the value where the true index is OOB
        ok = ((ii >= 0) & (ii < H) & (jj >= 0) & (jj < W))[:, None].astype(np.float64)
        flat = np.clip(ii, 0, H - 1) * W + np.clip(jj, 0, W - 1)
        return x.data.reshape(H * W, C)[flat] * ok, ok, flat

    v00, m00, f00 = corner(i0, j0)
    v01, m01, f01 = corner(i0, j0 + 1)
    v10, m10, f10 = corner(i0 + 1, j0)
    v11, m11, f11 = corner(i0 + 1, j0 + 1)
    w00 = (1.0 - di) * (1.0 - dj)
    w01 = (1.0 - di) * dj
    w10 = di * (1.0 - dj)
    w11 = di * dj
    data = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def backward(g):
        if x.requires_grad:
            vals = np.concatenate([g * (wk * mk) for wk, mk in
                                   ((w00, m00), (w01, m01), (w10, m10), (w11, m11))])
            flat = np.concatenate([f00, f01, f10, f11])
            # segment sum over sorted cell indices; OOB rows carry zero weight
            order = np.argsort(flat, kind="stable")
            sf = flat[order]
            starts = np.flatnonzero(np.r_[True, sf[1:] != sf[:-1]])
            sums = np.add.reduceat(vals[order], starts, axis=0)
            gx = np.zeros((H * W, C))
            gx[sf[starts]] = sums
            x._accum(gx.reshape(H, W, C))
        if points.requires_grad:
            ddi = (v10 - v00) * (1.0 - dj) + (v11 - v01) * dj
            ddj = (v01 - v00) * (1.0 - di) + (v11 - v10) * di
            gp = np.stack([(g * ddi).sum(axis=1), (g * ddj).sum(axis=1)], axis=1)
            points._accum(gp)

    return Tensor._from_op(data, (x, points), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused affine map ``x @ w + b`` for an N x Din token matrix."""
    x, w = _ensure(x), _ensure(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear expects N x D and D x O operands, got {x.shape}, {w.shape}")
    if b is None:
        data = x.data @ w.data
        parents: tuple = (x, w)
    else:
        b = _ensure(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear bias must have shape ({w.shape[1]},), got {b.shape}")
        data = x.data @ w.data + b.data
        parents = (x, w, b)

    def backward(g):
        if x.requires_grad:
            x._accum(g @ w.data.T)
        if w.requires_grad:
            w._accum(x.data.T @ g)
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=0))

    return Tensor._from_op(data, parents, backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """2-D convolution of an H x W x Cin map with a K x K x Cin x Cout kernel.

    Implemented as a single fused op: patch extraction and its transpose are
    K x K slice copies, so no scatter-add is needed in the backward pass.
    """
    x, w, b = _ensure(x), _ensure(w), _ensure(b)
    if x.ndim != 3 or w.ndim != 4:
        raise DimensionError(f"conv2d expects HWC input and KKIO kernel, got {x.shape}, {w.shape}")
    K = w.shape[0]
    cin, cout = w.shape[2], w.shape[3]
    if w.shape[1] != K or x.shape[2] != cin:
        raise DimensionError(f"conv2d kernel {w.shape} does not match input {x.shape}")
    xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0))) if padding else x.data
    Hp, Wp, _ = xp.shape
    ho = (Hp - K) // stride + 1
    wo = (Wp - K) // stride + 1
    patches = np.empty((ho, wo, K, K, cin))
    for ky in range(K):
        for kx in range(K):
            patches[:, :, ky, kx, :] = xp[ky:ky + (ho - 1) * stride + 1:stride,
                                          kx:kx + (wo - 1) * stride + 1:stride, :]
    flat = patches.reshape(ho * wo, K * K * cin)
    wf = w.data.reshape(K * K * cin, cout)
    data = (flat @ wf + b.data).reshape(ho, wo, cout)

    def backward(g):
        g2 = g.reshape(ho * wo, cout)
        if w.requires_grad:
            w._accum((flat.T @ g2).reshape(w.shape))
        if b.requires_grad:
            b._accum(g2.sum(axis=0))
        if x.requires_grad:
            gp = (g2 @ wf.T).reshape(ho, wo, K, K, cin)
            gxp = np.zeros_like(xp)
            for ky in range(K):
                for kx in range(K):
                    gxp[ky:ky + (ho - 1) * stride + 1:stride,
                        kx:kx + (wo - 1) * stride + 1:stride, :] += gp[:, :, ky, kx, :]
            x._accum(gxp[padding:-padding or None, padding:-padding or None, :]
                     if padding else gxp)

    return Tensor._from_op(data, (x, w, b), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of an H x W x C map by an integer factor.

    Backward sums the gradient over each source pixel's factor^2 replicas
    (a block sum over the replicated axes).
    """
    x = _ensure(x)
    if factor not in (1, 2, 4, 8):
        raise ConfigError(f"unsupported upsampling factor {factor}; expected one of 1, 2, 4, 8")
    if x.ndim != 3:
        raise DimensionError(f"upsample_nearest expects H x W x C, got {x.shape}")
    if factor == 1:
        return x
    h, w, c = x.shape
    data = np.repeat(np.repeat(x.data, factor, axis=0), factor, axis=1)

    def backward(g):
        if x.requires_grad:
            x._accum(g.reshape(h, factor, w, factor, c).sum(axis=(1, 3)))

    return Tensor._from_op(data, (x,), backward)


# ---- batch normalization -------------------------------------------------


class BatchNorm:
    """Per-channel batch normalization over all leading axes.

    Train mode normalizes with batch statistics and updates running
    statistics in place as ``running = (1 - momentum) * running +
    momentum * batch`` (biased variance throughout).  Eval mode uses the
    stored running statistics as constants.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        if eps <= 0.0:
            raise ConfigError(f"batch_norm eps must be positive, got {eps}")
        if not 0.0 < momentum <= 1.0:
            raise ConfigError(f"batch_norm momentum must be in (0, 1], got {momentum}")
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gain = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        x = _ensure(x)
        if x.shape[-1] != self.channels:
            raise DimensionError(
                f"batch_norm built for {self.channels} channels, input has {x.shape[-1]}")
        if training:
            axes = tuple(range(x.ndim - 1))
            mu = x.mean(axis=axes, keepdims=True)
            xc = x - mu
            var = (xc * xc).mean(axis=axes, keepdims=True)
            m = self.momentum
            self.running_mean *= 1.0 - m
            self.running_mean += m * mu.data.reshape(-1)
            self.running_var *= 1.0 - m
            self.running_var += m * var.data.reshape(-1)
            xn = xc / sqrt(var + self.eps)
        else:
            xn = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return xn * self.gain + self.bias
