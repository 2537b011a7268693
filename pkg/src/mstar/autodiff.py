"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive records itself on an implicit tape (the parent links of the
output tensor). ``backward`` topologically sorts that tape and accumulates
gradients additively at fan-out points. All arithmetic is 64-bit; any
non-finite value produced by a primitive raises immediately.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "NumericsError",
    "no_grad",
    "backward",
    "add", "sub", "mul", "div", "neg", "power",
    "exp", "log", "sqrt", "tanh", "sigmoid", "relu", "leaky_relu",
    "matmul", "tsum", "tmean", "tmax", "reshape", "transpose", "concat",
    "slice_axis", "gather_rows", "conv1d", "conv2d", "maxpool1d", "avgpool1d",
    "same_padding",
]


class NumericsError(ValueError):
    """Raised when an operation produces NaN/Inf or receives bad shapes."""


_grad_enabled = True
_finite_checks = True


class no_grad:
    """Context manager that disables tape recording (forward-only evaluation)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def set_finite_checks(enabled: bool) -> None:
    global _finite_checks
    _finite_checks = bool(enabled)


def _check(data: np.ndarray, op: str) -> np.ndarray:
    if _finite_checks and not np.isfinite(data).all():
        raise NumericsError(f"non-finite value produced by op '{op}'")
    return data


class Tensor:
    """A dense float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}, op={self._op})"

    # operator sugar; scalars and arrays are wrapped on the fly
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, parents, backward_fn):
    data = _check(np.asarray(data, dtype=np.float64), op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents),
                      _backward=backward_fn, _op=op)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Gradients accumulate additively at fan-out; tensors not on a path from
    a ``requires_grad`` leaf to the loss are never touched (callers should
    ``zero_grad`` parameters beforehand if they want explicit zeros).
    """
    if loss.data.size != 1:
        raise NumericsError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
            node._backward = None
            node._parents = ()


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, "add", (a, b), bwd)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, "sub", (a, b), bwd)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, "mul", (a, b), bwd)


def div(a, b):
    a, b = _wrap(a), _wrap(b)

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, "div", (a, b), bwd)


def neg(a):
    a = _wrap(a)

    def bwd(g):
        if a.requires_grad:
            _accum(a, -g)

    return _make(-a.data, "neg", (a,), bwd)


def power(a, p: float):
    a = _wrap(a)
    p = float(p)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * p * np.power(a.data, p - 1.0))

    return _make(np.power(a.data, p), "power", (a,), bwd)


def exp(a):
    a = _wrap(a)
    out_data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * out_data)

    return _make(out_data, "exp", (a,), bwd)


def log(a):
    a = _wrap(a)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    return _make(np.log(a.data), "log", (a,), bwd)


def sqrt(a):
    a = _wrap(a)
    out_data = np.sqrt(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * 0.5 / out_data)

    return _make(out_data, "sqrt", (a,), bwd)


def tanh(a):
    a = _wrap(a)
    out_data = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, "tanh", (a,), bwd)


def sigmoid(a):
    a = _wrap(a)
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                        np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, "sigmoid", (a,), bwd)


def relu(a):
    a = _wrap(a)
    mask = a.data > 0

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), "relu", (a,), bwd)


def leaky_relu(a, alpha: float = 0.01):
    a = _wrap(a)
    mask = a.data > 0

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * np.where(mask, 1.0, alpha))

    return _make(np.where(mask, a.data, alpha * a.data), "leaky_relu", (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra / shape


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)

    def bwd(g):
        if a.requires_grad:
            if b.data.ndim == 1:
                ga = np.multiply.outer(g, b.data) if g.ndim else g * b.data
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(np.asarray(ga), a.data.shape))
        if b.requires_grad:
            if a.data.ndim == 1:
                gb = np.multiply.outer(a.data, g) if g.ndim else a.data * g
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(np.asarray(gb), b.data.shape))

    return _make(a.data @ b.data, "matmul", (a, b), bwd)


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    axis_t = axis if axis is None or isinstance(axis, tuple) else (axis,)

    def bwd(g):
        if not a.requires_grad:
            return
        if axis_t is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis_t)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(a.data.sum(axis=axis_t, keepdims=keepdims), "sum", (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    axis_t = axis if axis is None or isinstance(axis, tuple) else (axis,)
    if axis_t is None:
        count = a.data.size
    else:
        count = int(np.prod([a.data.shape[ax] for ax in axis_t]))

    def bwd(g):
        if not a.requires_grad:
            return
        if axis_t is not None and not keepdims:
            g = np.expand_dims(g, axis_t)
        _accum(a, np.broadcast_to(g / count, a.data.shape).copy())

    return _make(a.data.mean(axis=axis_t, keepdims=keepdims), "mean", (a,), bwd)


def tmax(a, axis=None, keepdims=False):
    """Max reduction; gradient flows to the first occurrence of the max."""
    a = _wrap(a)
    if axis is None:
        out_data = a.data.max(keepdims=keepdims)
        flat_idx = int(a.data.argmax())

        def bwd_all(g):
            if a.requires_grad:
                buf = np.zeros_like(a.data)
                buf.flat[flat_idx] = float(np.sum(g))
                _accum(a, buf)

        return _make(out_data, "max", (a,), bwd_all)

    out_data = a.data.max(axis=axis, keepdims=keepdims)
    full = a.data.max(axis=axis, keepdims=True)
    hit = a.data == full
    first = hit & (np.cumsum(hit, axis=axis) == 1)

    def bwd(g):
        if a.requires_grad:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, first * g)

    return _make(out_data, "max", (a,), bwd)


def reshape(a, shape):
    a = _wrap(a)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), "reshape", (a,), bwd)


def transpose(a, axes=None):
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), "transpose", (a,), bwd)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, cuts, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 "concat", tuple(tensors), bwd)


def slice_axis(a, axis: int, lo: int, hi: int):
    a = _wrap(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(lo, hi)
    idx = tuple(idx)

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[idx] = g
            _accum(a, buf)

    return _make(a.data[idx], "slice", (a,), bwd)


def gather_rows(a, index):
    """Pick ``a[i, index[i]]`` for each row i (used by cross-entropy)."""
    a = _wrap(a)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.data.shape[0])

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, (rows, index), g)
            _accum(a, buf)

    return _make(a.data[rows, index], "gather_rows", (a,), bwd)


# ---------------------------------------------------------------------------
# convolution / pooling (stride 1)


def same_padding(k: int) -> tuple[int, int]:
    """Left/right zero padding that keeps length unchanged at stride 1."""
    return (k - 1) // 2, k // 2


def _windows1d(x: np.ndarray, k: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(x, k, axis=-1)


def conv1d(x, w, pad: tuple[int, int] | None = None):
    """Dense 1D cross-correlation; x (B,Cin,L), w (Cout,Cin,K), stride 1."""
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 3 or w.data.ndim != 3 or x.data.shape[1] != w.data.shape[1]:
        raise NumericsError(
            f"conv1d shape mismatch: input {x.data.shape}, kernel {w.data.shape}")
    cout, cin, k = w.data.shape
    pl, pr = same_padding(k) if pad is None else pad
    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pr)))
    cols = _windows1d(xp, k)  # (B, Cin, Lout, K)
    out = np.tensordot(cols, w.data, axes=([1, 3], [1, 2]))  # (B, Lout, Cout)
    out = np.ascontiguousarray(out.transpose(0, 2, 1))

    def bwd(g):
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2]))  # (Cout, Cin, K)
            _accum(w, gw)
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (0, 0), (k - 1 - pl, k - 1 - pr)))
            gcols = _windows1d(gp, k)  # (B, Cout, L, K)
            wf = w.data[:, :, ::-1]
            gx = np.tensordot(gcols, wf, axes=([1, 3], [0, 2]))  # (B, L, Cin)
            _accum(x, np.ascontiguousarray(gx.transpose(0, 2, 1)))

    return _make(out, "conv1d", (x, w), bwd)


def conv2d(x, w, pad: tuple[int, int, int, int] | None = None):
    """Dense 2D cross-correlation; x (B,Cin,H,W), w (Cout,Cin,Kh,Kw), stride 1."""
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise NumericsError(
            f"conv2d shape mismatch: input {x.data.shape}, kernel {w.data.shape}")
    cout, cin, kh, kw = w.data.shape
    if pad is None:
        pt, pb = same_padding(kh)
        plft, prgt = same_padding(kw)
    else:
        pt, pb, plft, prgt = pad
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (plft, prgt)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3]))  # (B,H,W,Cout)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bwd(g):
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            _accum(w, gw)
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (0, 0),
                            (kh - 1 - pt, kh - 1 - pb),
                            (kw - 1 - plft, kw - 1 - prgt)))
            gcols = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(2, 3))
            wf = w.data[:, :, ::-1, ::-1]
            gx = np.tensordot(gcols, wf, axes=([1, 4, 5], [0, 2, 3]))
            _accum(x, np.ascontiguousarray(gx.transpose(0, 3, 1, 2)))

    return _make(out, "conv2d", (x, w), bwd)


def _fold1d(v: np.ndarray, out_len: int) -> np.ndarray:
    """Overlap-add of windows v (..., L, K) back to a padded signal (..., out_len)."""
    L, k = v.shape[-2], v.shape[-1]
    buf = np.zeros(v.shape[:-2] + (out_len,), dtype=v.dtype)
    for j in range(k):
        buf[..., j:j + L] += v[..., :, j]
    return buf


def maxpool1d(x, k: int, pad: tuple[int, int] | None = None):
    """Sliding max, stride 1; padded positions never win (padded with -inf)."""
    x = _wrap(x)
    if x.data.ndim != 3:
        raise NumericsError(f"maxpool1d expects (B,C,L), got {x.data.shape}")
    pl, pr = same_padding(k) if pad is None else pad
    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pr)), constant_values=-np.inf)
    win = _windows1d(xp, k)  # (B,C,Lout,K)
    out = win.max(axis=-1)
    hit = win == out[..., None]
    first = hit & (np.cumsum(hit, axis=-1) == 1)

    def bwd(g):
        if x.requires_grad:
            folded = _fold1d(first * g[..., None], xp.shape[-1])
            L = x.data.shape[-1]
            _accum(x, folded[..., pl:pl + L])

    return _make(out, "maxpool1d", (x,), bwd)


def avgpool1d(x, k: int, pad: tuple[int, int] | None = None):
    """Sliding mean, stride 1, zero padding (count includes padded slots)."""
    x = _wrap(x)
    if x.data.ndim != 3:
        raise NumericsError(f"avgpool1d expects (B,C,L), got {x.data.shape}")
    pl, pr = same_padding(k) if pad is None else pad
    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pr)))
    out = _windows1d(xp, k).mean(axis=-1)

    def bwd(g):
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (0, 0), (k - 1 - pl, k - 1 - pr)))
            _accum(x, _windows1d(gp, k).sum(axis=-1) / k)

    return _make(out, "avgpool1d", (x,), bwd)
