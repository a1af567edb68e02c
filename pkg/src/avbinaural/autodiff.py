"""Minimal reverse-mode differentiation over numpy arrays.

Only the primitives the binaural generator needs are provided. Every primitive
returns a new :class:`Tensor`; a graph node is recorded whenever one of the
inputs requires a gradient and recording is enabled.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

# Per-thread mode flags, so inference threads entering no_grad cannot restore
# each other's state.
_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_STATE, "grad", True)


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = _grad_enabled()
    _STATE.grad = False
    try:
        yield
    finally:
        _STATE.grad = prev


# When a list, non-smooth primitives append an array naming the smooth piece
# each input element lies on; the gradient checker uses it to discard
# finite-difference probes that straddle a kink.
@contextlib.contextmanager
def record_pieces():
    prev = getattr(_STATE, "pieces", None)
    _STATE.pieces = log = []
    try:
        yield log
    finally:
        _STATE.pieces = prev


def _piece(arr) -> None:
    log = getattr(_STATE, "pieces", None)
    if log is not None:
        log.append(np.asarray(arr))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires a gradient."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward: loss must be a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topo_order(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    post: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    post.reverse()
    return post


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def square(x: Tensor) -> Tensor:
    d = x.data
    return _make(d * d, (x,), lambda g: (2 * g * d,), "square")


def tabs(x: Tensor) -> Tensor:
    d = x.data
    _piece(d > 0)
    return _make(np.abs(d), (x,), lambda g: (g * np.sign(d),), "abs")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    d = x.data
    return _make(np.log(d), (x,), lambda g: (g / d,), "log")


def magnitude(re: Tensor, im: Tensor) -> Tensor:
    """Modulus of a complex grid stored as two real tensors; subgradient 0 at the origin."""
    if re.shape != im.shape:
        raise ShapeError(f"magnitude: real {re.shape} vs imag {im.shape}")
    r = np.sqrt(re.data * re.data + im.data * im.data)
    safe = np.where(r > 0, r, 1)
    zero = r == 0
    _piece(zero)

    def backward(g):
        gr = np.where(zero, 0, g / safe)
        return gr * re.data, gr * im.data

    return _make(r, (re, im), backward, "magnitude")


def atan2(y: Tensor, x: Tensor) -> Tensor:
    if y.shape != x.shape:
        raise ShapeError(f"atan2: {y.shape} vs {x.shape}")
    r2 = x.data * x.data + y.data * y.data
    inv = np.where(r2 > 0, 1 / np.where(r2 > 0, r2, 1), 0)
    _piece((x.data < 0) & (y.data >= 0))  # side of the branch cut

    def backward(g):
        return g * x.data * inv, -g * y.data * inv

    return _make(np.arctan2(y.data, x.data), (y, x), backward, "atan2")


def wrap_phase(x: Tensor) -> Tensor:
    """Principal angle in (-pi, pi]; piecewise identity so the gradient is 1."""
    two_pi = 2 * np.pi
    out = np.pi - np.mod(np.pi - x.data, two_pi)
    _piece(np.floor((np.pi - x.data) / two_pi))
    return _make(out.astype(x.dtype), (x,), lambda g: (g,), "wrap_phase")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    _piece(y > 0)
    return _make(y, (x,), lambda g: (np.where(y > 0, g, 0),), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    slope = x.dtype.type(slope)
    y = np.where(x.data > 0, x.data, x.data * slope)
    _piece(x.data > 0)

    def backward(g):
        return (np.where(x.data > 0, g, g * slope),)

    return _make(y, (x,), backward, "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), backward, "log_softmax")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (x,), backward, "l2_normalize")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[a] for a in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).astype(x.dtype),)

    return _make(np.asarray(out), (x,), backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    src = x.shape
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "permute")


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    shape, dtype = x.shape, x.dtype

    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in
                (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; ``b`` may be a shared 2-D matrix."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# convolutional primitives (NCHW, weights Cout x Cin x KH x KW)
# ---------------------------------------------------------------------------


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, KH: int, KW: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """NHWC padded input -> (B, Ho, Wo, KH*KW*C) patch matrix (tap-major)."""
    B, _, _, C = xp.shape
    if KH == KW == stride and xp.shape[1] == Ho * KH and xp.shape[2] == Wo * KW:
        # non-overlapping patches: a pure space-to-depth rearrangement
        return xp.reshape(B, Ho, KH, Wo, KW, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, Ho, Wo, KH * KW * C)
    cols = np.empty((B, Ho, Wo, KH * KW * C), dtype=xp.dtype)
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    t = 0
    for i in range(KH):
        for j in range(KW):
            cols[..., t * C : (t + 1) * C] = xp[:, i : i + hs : stride, j : j + ws : stride, :]
            t += 1
    return cols


def _col2im(gcols: np.ndarray, shape, KH: int, KW: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    B, Hp, Wp, C = shape
    if KH == KW == stride and Hp == Ho * KH and Wp == Wo * KW:
        g = gcols.reshape(B, Ho, Wo, KH, KW, C).transpose(0, 1, 3, 2, 4, 5)
        return g.reshape(B, Hp, Wp, C)
    gxp = np.zeros(shape, dtype=gcols.dtype)
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    t = 0
    for i in range(KH):
        for j in range(KW):
            gxp[:, i : i + hs : stride, j : j + ws : stride, :] += gcols[..., t * C : (t + 1) * C]
            t += 1
    return gxp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    Co, Ci, KH, KW = w.shape
    if C != Ci:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Ci}")
    Ho, Wo = _out_size(H, KH, stride, pad), _out_size(W, KW, stride, pad)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {KH}x{KW} too large for input {H}x{W} with pad {pad}")
    xh = x.data.transpose(0, 2, 3, 1)
    if pad:
        xh = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    padded_shape = xh.shape
    cols = _im2col(xh, KH, KW, stride, Ho, Wo).reshape(B * Ho * Wo, KH * KW * C)
    del xh
    wmat = w.data.transpose(2, 3, 1, 0).reshape(KH * KW * C, Co)
    out = cols @ wmat
    if b is not None:
        out += b.data
    result = np.ascontiguousarray(out.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co)
        gw = (cols.T @ g2).reshape(KH, KW, C, Co).transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, Ho, Wo, KH * KW * C)
            gxp = _col2im(gcols, padded_shape, KH, KW, stride, Ho, Wo)
            if pad:
                gxp = gxp[:, pad : pad + H, pad : pad + W, :]
            gx = np.ascontiguousarray(gxp.transpose(0, 3, 1, 2))
        grads = [gx, np.ascontiguousarray(gw)]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make(result, parents, backward, "conv2d")


def conv2d_transpose(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0
) -> Tensor:
    """Adjoint of :func:`conv2d`; weight layout Cin x Cout x KH x KW."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d_transpose: expected 4-D input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    Ci, Co, KH, KW = w.shape
    if C != Ci:
        raise ShapeError(f"conv2d_transpose: input has {C} channels, weight expects {Ci}")
    Hp, Wp = (H - 1) * stride + KH, (W - 1) * stride + KW
    Ho, Wo = Hp - 2 * pad, Wp - 2 * pad
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d_transpose: padding {pad} removes the whole output")
    xmat = x.data.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(C, KH * KW * Co)
    gcols = (xmat @ wmat).reshape(B, H, W, KH * KW * Co)
    outp = _col2im(gcols, (B, Hp, Wp, Co), KH, KW, stride, H, W)
    out = outp[:, pad : pad + Ho, pad : pad + Wo, :]
    if b is not None:
        out = out + b.data
    result = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        gh = g.transpose(0, 2, 3, 1)
        if pad:
            gh = np.pad(gh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        cols = _im2col(gh, KH, KW, stride, H, W).reshape(B * H * W, KH * KW * Co)
        gx = (cols @ wmat.T).reshape(B, H, W, C).transpose(0, 3, 1, 2)
        gw = (xmat.T @ cols).reshape(C, KH, KW, Co).transpose(0, 3, 1, 2)
        grads = [np.ascontiguousarray(gx), np.ascontiguousarray(gw)]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make(result, parents, backward, "conv2d_transpose")


def batchnorm2d(
    x: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    weight: Tensor | None = None,
    bias: Tensor | None = None,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalisation over (N, H, W); running buffers are updated in place in training mode."""
    if x.ndim != 4 or running_mean.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d: input {x.shape} vs running stats {running_mean.shape}")
    xd = x.data
    axes = (0, 2, 3)
    if training:
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat
    if weight is not None:
        out = out * weight.data[None, :, None, None]
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gy = g if weight is None else g * weight.data[None, :, None, None]
        if training:
            m = xd.shape[0] * xd.shape[2] * xd.shape[3]
            sg = gy.sum(axis=axes, keepdims=True)
            sgx = (gy * xhat).sum(axis=axes, keepdims=True)
            gx = inv[None, :, None, None] / m * (m * gy - sg - xhat * sgx)
        else:
            gx = gy * inv[None, :, None, None]
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=axes))
        if bias is not None:
            grads.append(g.sum(axis=axes))
        return grads

    parents = tuple(t for t in (x, weight, bias) if t is not None)
    return _make(np.ascontiguousarray(out), parents, backward, "batchnorm2d")


def avgpool2d(x: Tensor, k: int) -> Tensor:
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ShapeError(f"avgpool2d: spatial dims {H}x{W} not divisible by {k}")
    out = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return _make(out, (x,), backward, "avgpool2d")


def upsample_nearest2(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), backward, "upsample_nearest2")


# low-res tap used by output phase p for kernel row i of a 3x3 conv on a
# nearest-upsampled grid (index into the zero-padded low-res input)
_UP_TAP = ((0, 1, 1), (1, 1, 2))


def upsample_conv3x3(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``conv2d(upsample_nearest2(x), w, b, stride=1, pad=1)`` without materialising the upsampled map.

    Each of the four output phases is a 3x3 conv of the low-res input with a
    folded kernel; all four share one patch matrix and one GEMM.
    """
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"upsample_conv3x3: expected 4-D input and 3x3 weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    Co, Ci = w.shape[:2]
    if C != Ci:
        raise ShapeError(f"upsample_conv3x3: input has {C} channels, weight expects {Ci}")
    xh = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (1, 1), (1, 1), (0, 0)))
    padded_shape = xh.shape
    cols = _im2col(xh, 3, 3, 1, H, W).reshape(B * H * W, 9 * C)
    del xh
    weff = np.zeros((3, 3, C, 2, 2, Co), dtype=w.dtype)
    for p in range(2):
        for q in range(2):
            for i in range(3):
                for j in range(3):
                    weff[_UP_TAP[p][i], _UP_TAP[q][j], :, p, q, :] += w.data[:, :, i, j].T
    wmat = weff.reshape(9 * C, 4 * Co)
    out = cols @ wmat
    if b is not None:
        out += np.tile(b.data, 4)
    result = out.reshape(B, H, W, 2, 2, Co).transpose(0, 5, 1, 3, 2, 4).reshape(B, Co, 2 * H, 2 * W)
    result = np.ascontiguousarray(result)

    def backward(g):
        g2 = g.reshape(B, Co, H, 2, W, 2).transpose(0, 2, 4, 3, 5, 1).reshape(B * H * W, 4 * Co)
        geff = (cols.T @ g2).reshape(3, 3, C, 2, 2, Co)
        gw = np.zeros_like(w.data)
        for p in range(2):
            for q in range(2):
                for i in range(3):
                    for j in range(3):
                        gw[:, :, i, j] += geff[_UP_TAP[p][i], _UP_TAP[q][j], :, p, q, :].T
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, H, W, 9 * C)
            gxp = _col2im(gcols, padded_shape, 3, 3, 1, H, W)
            gx = np.ascontiguousarray(gxp[:, 1 : 1 + H, 1 : 1 + W, :].transpose(0, 3, 1, 2))
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.reshape(-1, 4, Co).sum(axis=(0, 1)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make(result, parents, backward, "upsample_conv3x3")
