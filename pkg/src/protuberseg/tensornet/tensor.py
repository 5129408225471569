"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray plus an optional grad buffer. Ops build a
graph of parent links and backward closures; Tensor.backward() runs the
closures in reverse topological order. Network ops use the layout
(batch, channels, z, y, x).
"""

from __future__ import annotations

from itertools import product

import numpy as np

from ..volume import NumericFault


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Seed with ones (scalar outputs only) and backpropagate."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
        # the closures reference their output tensors, forming reference
        # cycles that would otherwise wait on the cyclic collector while
        # whole graphs of large arrays pile up; break them eagerly
        for node in topo:
            node._backward = None
            node._parents = ()

    # operator sugar (elementwise, numpy broadcasting)
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(_lift(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)
    out_data = a.data * b.data

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-out.grad * a.data / (b.data ** 2),
                                       b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad / a.data)

    out = _make(out_data, (a,), backward)
    return out


def sigmoid(a: Tensor) -> Tensor:
    # stable two-branch form: never exponentiates a positive argument
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * out_data * (1.0 - out_data))

    out = _make(out_data, (a,), backward)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0.0)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * mask)

    out = _make(out_data, (a,), backward)
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only strictly inside (lo, hi)."""
    inside = (a.data > lo) & (a.data < hi)
    out_data = np.clip(a.data, lo, hi)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * inside)

    out = _make(out_data, (a,), backward)
    return out


def clamp01(a: Tensor) -> Tensor:
    """Clip to [0, 1]; gradient passes only strictly inside (0, 1)."""
    return clamp(a, 0.0, 1.0)


def tsum(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum())

    def backward():
        if a.requires_grad:
            a._accumulate(np.broadcast_to(out.grad, a.shape).copy())

    out = _make(out_data, (a,), backward)
    return out


def tmean(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.mean())

    def backward():
        if a.requires_grad:
            a._accumulate(np.full(a.shape, float(out.grad) / a.data.size,
                                  dtype=a.dtype))

    out = _make(out_data, (a,), backward)
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack along the channel axis (axis 1 of (B, C, z, y, x))."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"incompatible shapes {a.shape} vs {b.shape}")
    out_data = np.concatenate([a.data, b.data], axis=1)
    ca = a.shape[1]

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad[:, :ca])
        if b.requires_grad:
            b._accumulate(out.grad[:, ca:])

    out = _make(out_data, (a, b), backward)
    return out


def narrow_channels(a: Tensor, lo: int, hi: int) -> Tensor:
    """Select channels [lo, hi) along axis 1."""
    out_data = a.data[:, lo:hi]

    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[:, lo:hi] = out.grad
            a._accumulate(g)

    out = _make(out_data, (a,), backward)
    return out


# ---------------------------------------------------------------------------
# conv / pool / upsample

def conv3d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation with 'same' padding for odd kernels.

    x: (B, Cin, D, H, W); w: (Cout, Cin, k, k, k); b: (Cout,).
    stride 2 requires even spatial dims and halves them.
    """
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    bsz, cin, d, h, wdt = x.shape
    cout, cin_w, k = w.shape[0], w.shape[1], w.shape[2]
    if cin_w != cin:
        raise ValueError(f"channel mismatch: input {cin}, kernel {cin_w}")
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ValueError(f"kernel must be cubic with odd extent, {w.shape}")
    if b.shape != (cout,):
        raise ValueError(f"bias shape {b.shape} != ({cout},)")
    if stride == 2 and any(n % 2 for n in (d, h, wdt)):
        raise ValueError(f"stride 2 needs even spatial dims, got {x.shape}")
    p = k // 2
    od, oh, ow = d // stride, h // stride, wdt // stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))

    def _win(arr, kd, kh, kw):
        return arr[:, :,
                   kd:kd + stride * od:stride,
                   kh:kh + stride * oh:stride,
                   kw:kw + stride * ow:stride]

    out_data = np.empty((cout, bsz, od, oh, ow), dtype=x.dtype)
    out_data[:] = b.data.reshape(cout, 1, 1, 1, 1)
    for kd, kh, kw in product(range(k), repeat=3):
        # (Cout, Cin) . (B, Cin, od, oh, ow) over Cin -> (Cout, B, ...)
        out_data += np.tensordot(w.data[:, :, kd, kh, kw],
                                 _win(xp, kd, kh, kw), axes=([1], [1]))
    out_data = np.ascontiguousarray(out_data.transpose(1, 0, 2, 3, 4))

    def backward():
        go = out.grad
        if b.requires_grad:
            b._accumulate(go.sum(axis=(0, 2, 3, 4)))
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for kd, kh, kw in product(range(k), repeat=3):
                gw[:, :, kd, kh, kw] = np.tensordot(
                    go, _win(xp, kd, kh, kw),
                    axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            w._accumulate(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for kd, kh, kw in product(range(k), repeat=3):
                # (Cin, Cout) . (B, Cout, ...) over Cout -> (Cin, B, ...)
                contrib = np.tensordot(w.data[:, :, kd, kh, kw].T, go,
                                       axes=([1], [1]))
                _win(gxp, kd, kh, kw)[...] += contrib.transpose(1, 0, 2, 3, 4)
            x._accumulate(gxp[:, :, p:p + d, p:p + h, p:p + wdt])

    out = _make(out_data, (x, w, b), backward)
    return out


def maxpool3d(x: Tensor) -> Tensor:
    """2x2x2 max pooling, stride 2; gradient routes to the argmax, ties
    broken toward the lowest linear index within each window."""
    bsz, c, d, h, w = x.shape
    if any(n % 2 for n in (d, h, w)):
        raise ValueError(f"maxpool needs even spatial dims, got {x.shape}")
    od, oh, ow = d // 2, h // 2, w // 2
    win = (x.data.reshape(bsz, c, od, 2, oh, 2, ow, 2)
           .transpose(0, 1, 2, 4, 6, 3, 5, 7)
           .reshape(bsz, c, od, oh, ow, 8))
    arg = win.argmax(axis=-1)  # first occurrence = lowest linear offset
    out_data = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward():
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, arg[..., None], out.grad[..., None], axis=-1)
        gx = (gwin.reshape(bsz, c, od, oh, ow, 2, 2, 2)
              .transpose(0, 1, 2, 5, 3, 6, 4, 7)
              .reshape(x.shape))
        x._accumulate(gx)

    out = _make(out_data, (x,), backward)
    return out


def _upsample_weights(n_in: int, dtype):
    """Indices/weights for 2x linear upsampling, align-corners-false."""
    coords = (np.arange(2 * n_in, dtype=np.float64) + 0.5) / 2.0 - 0.5
    coords = np.clip(coords, 0.0, n_in - 1.0)
    i0 = np.floor(coords).astype(np.int64)
    i0 = np.minimum(i0, max(n_in - 2, 0))
    wgt = (coords - i0).astype(dtype)
    return i0, wgt


def upsample2x(x: Tensor) -> Tensor:
    """Trilinear 2x upsampling (separable), exact adjoint in backward."""
    data = x.data
    plans = []
    for ax in range(2, 5):
        i0, wgt = _upsample_weights(data.shape[ax], x.dtype)
        plans.append((ax, i0, wgt))
        shape = [1] * data.ndim
        shape[ax] = -1
        wb = wgt.reshape(shape)
        lo = np.take(data, i0, axis=ax)
        hi = np.take(data, np.minimum(i0 + 1, data.shape[ax] - 1), axis=ax)
        data = lo * (1 - wb) + hi * wb

    def backward():
        g = out.grad
        for ax, i0, wgt in reversed(plans):
            # input length along this axis is half the current grad length
            n = g.shape[ax] // 2
            shape = [1] * g.ndim
            shape[ax] = -1
            wb = wgt.reshape(shape)
            gi = np.zeros(g.shape[:ax] + (n,) + g.shape[ax + 1:],
                          dtype=g.dtype)
            i1 = np.minimum(i0 + 1, n - 1)
            np.add.at(gi, (slice(None),) * ax + (i0,), g * (1 - wb))
            np.add.at(gi, (slice(None),) * ax + (i1,), g * wb)
            g = gi
        x._accumulate(g)

    out = _make(data, (x,), backward)
    return out


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericFault(f"non-finite values after {where}")
    return t
