"""Dense tensors with tape-based reverse-mode differentiation.

Images and feature maps are channels-last: ``H x W x D`` for a single image or
``N x H x W x D`` for a batch. Every differentiable op builds its output with
:func:`_node`, which records the parents and a closure mapping the output
gradient to one gradient per parent.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels

IGNORE_INDEX = 255

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim and min(arr.shape) <= 0:
            raise ValueError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return detach(self)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a scalar")
        return scalar_div(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def detach(t: Tensor) -> Tensor:
    return Tensor(t.data)


def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not attached to any tensor that requires grad")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# elementwise and reductions

def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) and np.ndim(x) == 0


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return _node(a.data + a.data.dtype.type(b), (a,), lambda g: (g,), "add_scalar")
    if _is_scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -b)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return _node(a.data * s, (a,), lambda g: (g * s,), "scalar_mul")


def scalar_div(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return _node(a.data / s, (a,), lambda g: (g / s,), "scalar_div")


def mul(a, b) -> Tensor:
    """Elementwise product of same-shape tensors, or tensor times scalar."""
    if _is_scalar(b):
        return scalar_mul(as_tensor(a), b)
    if _is_scalar(a):
        return scalar_mul(as_tensor(b), a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


mul_elementwise = mul


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array broadcast to ``a``'s shape (masks, weights)."""
    c = np.broadcast_to(np.asarray(c, dtype=a.data.dtype), a.shape)
    return _node(a.data * c, (a,), lambda g: (g * c,), "mul_const")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0).astype(a.data.dtype, copy=False), (a,),
                 lambda g: (g * pos,), "relu")


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scalar_mul(sum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def take(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; gradient scattered back with accumulation."""
    shape, dtype = a.shape, a.data.dtype
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, slice)) or i is Ellipsis for i in parts)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(data, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


# --------------------------------------------------------------------------
# convolution and resampling

def _batched(x: np.ndarray):
    return (x[None], True) if x.ndim == 3 else (x, False)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0,
           bias: Optional[Tensor] = None) -> Tensor:
    """Cross-correlation of a channels-last image with a ``k x k x Din x Dout`` kernel."""
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"conv2d: kernel must be k x k x Din x Dout, got {kernel.shape}")
    k, _, din, dout = kernel.shape
    if k % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got {k}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got {stride}, {pad}")
    if x.ndim not in (3, 4) or x.shape[-1] != din:
        raise ValueError(f"conv2d: input {x.shape} does not match kernel Din={din}")
    if bias is not None and bias.shape != (dout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({dout},)")
    xd, squeeze = _batched(x.data)
    n, h, w, _ = xd.shape
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ValueError(f"conv2d: input {h}x{w} smaller than kernel {k} with pad {pad}")
    hp, wp = h + 2 * pad, w + 2 * pad
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    kd = kernel.data.astype(xd.dtype, copy=False)
    k2 = kd.reshape(k * k * din, dout)

    if k == 1 and stride == 1 and pad == 0:
        cols = xd.reshape(-1, din)
    else:
        if pad:
            xp = np.zeros((n, hp, wp, din), dtype=xd.dtype)
            xp[:, pad:pad + h, pad:pad + w] = xd
        else:
            xp = np.ascontiguousarray(xd)
        cols = kernels.im2col(xp, k, stride).reshape(n * ho * wo, k * k * din)
    out = cols @ k2
    if bias is not None:
        out += bias.data.astype(out.dtype, copy=False)
    out = out.reshape(n, ho, wo, dout)
    if squeeze:
        out = out[0]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g2 = g.reshape(-1, dout)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (cols.T @ g2).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = g2 @ k2.T
            if k == 1 and stride == 1 and pad == 0:
                gx = gcols.reshape(x.shape)
            else:
                gxp = kernels.col2im(gcols.reshape(n, ho, wo, k, k, din), hp, wp, stride)
                gx = gxp[:, pad:pad + h, pad:pad + w].reshape(x.shape)
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _node(out, parents, bw, "conv2d")


def nearest_indices(size_in: int, size_out: int) -> np.ndarray:
    """Source index of every output cell: ``floor(i * in / out)``."""
    return (np.arange(size_out) * size_in) // size_out


def resize_nearest_array(a: np.ndarray, new_h: int, new_w: int, axes=(-3, -2)) -> np.ndarray:
    """Nearest-neighbour resampling of a plain array along two spatial axes."""
    ah, aw = axes
    rows = nearest_indices(a.shape[ah], new_h)
    cols = nearest_indices(a.shape[aw], new_w)
    return np.take(np.take(a, rows, axis=ah), cols, axis=aw)


def nearest_resize(t: Tensor, new_h: int, new_w: int) -> Tensor:
    if new_h <= 0 or new_w <= 0:
        raise ValueError(f"nearest_resize: target extents must be positive, got {new_h}x{new_w}")
    if t.ndim not in (3, 4):
        raise ValueError(f"nearest_resize: expected H x W x D or N x H x W x D, got {t.shape}")
    h, w = t.shape[-3], t.shape[-2]
    if (h, w) == (new_h, new_w):
        return t
    out = resize_nearest_array(t.data, new_h, new_w)
    shape, dtype = t.shape, t.data.dtype

    def bw(g):
        gb, squeeze = _batched(g)
        n, d = gb.shape[0], gb.shape[-1]
        if new_h % h == 0 and new_w % w == 0:
            fh, fw = new_h // h, new_w // w
            gs = gb.reshape(n, h, fh, w, fw, d).sum(axis=(2, 4))
        else:
            gs = np.zeros((n, h, w, d), dtype=dtype)
            rows = nearest_indices(h, new_h)
            cols = nearest_indices(w, new_w)
            if h % new_h == 0 and w % new_w == 0:
                gs[:, rows[:, None], cols[None, :]] = gb
            else:
                np.add.at(gs, (slice(None), rows[:, None], cols[None, :]), gb)
        return (gs.reshape(shape),)

    return _node(out, (t,), bw, "nearest_resize")


def channel_dropout(t: Tensor, p: float, rng: Optional[np.random.Generator] = None,
                    keep: Optional[np.ndarray] = None):
    """Zero whole channels with probability ``p``; survivors scaled by ``1/(1-p)``.

    Returns ``(output, keep)``. One keep flag per channel (``D``) for a single
    image, per image and channel (``N x D``) for a batch. Pass ``keep`` back
    in to reuse a realization.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"channel_dropout: p must be in [0, 1), got {p}")
    lead = (t.shape[0], t.shape[-1]) if t.ndim == 4 else (t.shape[-1],)
    if keep is None:
        if p == 0.0:
            return t, np.ones(lead, dtype=bool)
        if rng is None:
            raise ValueError("channel_dropout: need rng or keep")
        keep = rng.random(lead) >= p
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != lead:
        raise ValueError(f"channel_dropout: keep mask {keep.shape} != {lead}")
    scale = keep.astype(t.data.dtype) / t.data.dtype.type(1.0 - p)
    bshape = (lead[0], 1, 1, lead[1]) if t.ndim == 4 else (1, 1, lead[0])
    return mul_const(t, scale.reshape(bshape)), keep


# --------------------------------------------------------------------------
# probabilities and losses

def softmax_channels(logits: Tensor) -> Tensor:
    if logits.shape[-1] < 2:
        raise ValueError("softmax_channels needs at least two channels")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (logits,), bw, "softmax")


def log_softmax_channels(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _node(out, (logits,), bw, "log_softmax")


def pixel_weights(target: np.ndarray, normalize: str = "valid",
                  ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Per-pixel weights giving a per-image mean over valid pixels, then a batch mean.

    ``normalize="valid"`` divides by the valid count of each image (images with
    no valid pixel contribute zero); ``"all"`` divides by H*W.
    """
    t = target[None] if target.ndim == 2 else target
    valid = t != ignore_index
    if normalize == "valid":
        counts = valid.reshape(len(t), -1).sum(axis=1).astype(np.float64)
        denom = np.where(counts > 0, counts, 1.0)
    elif normalize == "all":
        denom = np.full(len(t), float(t[0].size))
    else:
        raise ValueError(f"unknown normalization {normalize!r}")
    w = valid / denom[:, None, None] / len(t)
    return w.reshape(target.shape)


def cross_entropy(pred: Tensor, target: np.ndarray, ignore_index: int = IGNORE_INDEX,
                  from_logits: bool = False, normalize: str = "valid") -> Tensor:
    """Mean negative log-likelihood of ``target`` under ``pred``.

    ``pred`` holds per-pixel distributions (or logits with ``from_logits``)
    over the last axis. Pixels equal to ``ignore_index`` contribute neither to
    the value nor to the gradient. Batched input is averaged per image first.
    """
    target = np.asarray(target)
    c = pred.shape[-1]
    if target.shape != pred.shape[:-1]:
        raise ValueError(f"cross_entropy: target {target.shape} vs prediction {pred.shape}")
    valid = target != ignore_index
    bad = valid & ((target < 0) | (target >= c))
    if bad.any():
        raise ValueError(f"cross_entropy: class index {int(target[bad].flat[0])} outside [0, {c})")
    w = pixel_weights(target, normalize, ignore_index).astype(pred.data.dtype)
    tgt = np.where(valid, target, 0).astype(np.intp)[..., None]
    pd = pred.data
    if from_logits:
        z = pd - pd.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    else:
        with np.errstate(divide="ignore"):
            logp = np.log(pd)
    picked = np.take_along_axis(logp, tgt, axis=-1)[..., 0]
    loss = -np.sum(np.where(valid, w * picked, 0.0))
    loss = np.asarray(loss, dtype=pd.dtype)

    def bw(g):
        gw = (g * w)[..., None]
        if from_logits:
            grad = np.exp(logp) * gw
            np.put_along_axis(grad, tgt, np.take_along_axis(grad, tgt, axis=-1) - gw, axis=-1)
            return (grad,)
        grad = np.zeros_like(pd)
        p_t = np.take_along_axis(pd, tgt, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = np.where(gw != 0, -gw / p_t, 0.0)
        np.put_along_axis(grad, tgt, val.astype(pd.dtype), axis=-1)
        return (grad,)

    return _node(loss, (pred,), bw, "cross_entropy")


def mse(r: Tensor, x) -> Tensor:
    """Mean squared error over all elements (K = H*W*D, times N when batched)."""
    x = as_tensor(x, dtype=r.data.dtype)
    _check_same(r, x, "mse")
    diff = r.data - x.data
    k = diff.size
    val = np.asarray(np.sum(diff * diff) / k, dtype=r.data.dtype)

    def bw(g):
        gr = diff * (2.0 * g / k)
        return (gr, -gr)

    return _node(val, (r, x), bw, "mse")


def cosine_similarity(z: Tensor, v: np.ndarray, eps: float = 0.0) -> Tensor:
    """Cosine between each row ``z[..., :]`` and a constant target ``v`` of matching shape.

    Rows with zero norm (in ``z`` or ``v``) yield 0 with zero gradient.
    """
    v = np.broadcast_to(np.asarray(v, dtype=z.data.dtype), z.shape)
    zn = np.sqrt((z.data * z.data).sum(axis=-1))
    vn = np.sqrt((v * v).sum(axis=-1))
    ok = (zn > eps) & (vn > 0)
    denom = np.where(ok, zn * vn, 1.0)
    cos = np.where(ok, (z.data * v).sum(axis=-1) / denom, 0.0).astype(z.data.dtype)

    def bw(g):
        zn2 = np.where(ok, zn * zn, 1.0)
        gz = (v / denom[..., None] - cos[..., None] * z.data / zn2[..., None]) * g[..., None]
        return (np.where(ok[..., None], gz, 0.0).astype(z.data.dtype),)

    return _node(cos, (z,), bw, "cosine")
