"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Row-major numpy storage, a dynamically recorded op graph, and just enough
operations for attention, convolution, normalization and the AdamW update.
Precision (float32 for training, float64 for verification) is fixed when a
tensor is constructed and propagates through ops.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "TensorError", "ShapeError", "NumericsError",
    "tensor", "parameter", "add", "sub", "mul", "neg", "matmul", "linear",
    "reshape", "permute", "roll", "pad", "slice_", "concat", "gather",
    "mean", "sum_", "softmax", "log_softmax", "layer_norm", "gelu", "relu",
    "conv3d", "cross_entropy", "dropout", "backward",
    "AdamWState", "adamw_step",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class TensorError(Exception):
    pass


class ShapeError(TensorError):
    pass


class NumericsError(TensorError):
    pass


class Tensor:
    """Dense N-D array with optional gradient buffer.

    ``requires_grad=True`` marks a graph leaf; intermediate results record
    their parents and a backward rule whenever a leaf is reachable.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward_fn = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def _on_path(self) -> bool:
        return self.requires_grad or self._backward_fn is not None

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def permute(self, *axes):
        return permute(self, axes if len(axes) > 1 else axes[0])


def tensor(data, dtype=np.float32) -> Tensor:
    return Tensor(data, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str):
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by op '{op}'")


def _make(data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if any(p._on_path() for p in parents):
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), bwd, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    data = xd * phi

    def bwd(g):
        dens = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (phi + xd * dens),)

    return _make(data, (x,), bwd, "gelu")


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)
    return _make(data, (x,), lambda g: (g * (x.data > 0),), "relu")


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), bwd, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., in] @ w[in, out] (+ b[out])."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


# -- structural --------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    data = x.data.reshape(shape)
    return _make(data, (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.transpose(x.data, axes)
    return _make(data, (x,), lambda g: (np.transpose(g, inv),), "permute")


def roll(x: Tensor, shifts, axes) -> Tensor:
    shifts = tuple(shifts)
    axes = tuple(axes)
    data = np.roll(x.data, shifts, axis=axes)
    back = tuple(-s for s in shifts)
    return _make(data, (x,), lambda g: (np.roll(g, back, axis=axes),), "roll")


def pad(x: Tensor, pad_width) -> Tensor:
    """Zero-pad; pad_width as in np.pad."""
    pw = tuple((int(a), int(b)) for a, b in pad_width)
    data = np.pad(x.data, pw)
    sl = tuple(slice(a, a + n) for (a, _), n in zip(pw, x.shape))
    return _make(data, (x,), lambda g: (g[sl],), "pad")


def slice_(x: Tensor, slices) -> Tensor:
    sl = tuple(slices)
    data = x.data[sl]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _make(data, (x,), bwd, "slice")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), bwd, "concat")


def gather(x: Tensor, indices: np.ndarray) -> Tensor:
    """Index rows of ``x`` along axis 0 with an integer array."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather index out of range for extent {x.shape[0]}")
    data = x.data[idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(data, (x,), bwd, "gather")


# -- reductions ---------------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.full_like(x.data, 1.0) * g,)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, x.shape).copy(),)

    return _make(data, (x,), bwd, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    s = sum_(x, axis=axis, keepdims=keepdims)
    return mul(s, Tensor(np.asarray(1.0 / n, dtype=x.dtype)))


# -- nonlinear blocks ----------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), bwd, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    sm = np.exp(data)

    def bwd(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(data, (x,), bwd, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last extent {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def bwd(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _make(data, (x, gamma, beta), bwd, "layer_norm")


# -- convolution ----------------------------------------------------------------

def _triple(v):
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ShapeError(f"expected 3 extents, got {v}")
    return t


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0,
           groups: int = 1) -> Tensor:
    """3D cross-correlation.

    x: [N, T, H, W, Cin], w: [kt, kh, kw, Cin // groups, Cout].
    Output extents: floor((in + 2 pad - k) / stride) + 1 per spatial axis.
    """
    st, sh, sw = _triple(stride)
    pt, ph, pw = _triple(padding)
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input/kernel, got {x.shape} / {w.shape}")
    n, t, h, wd, cin = x.shape
    kt, kh, kw, cg, cout = w.shape
    if cin % groups or cout % groups:
        raise ShapeError(f"channels {cin}->{cout} not divisible by groups={groups}")
    if cg != cin // groups:
        raise ShapeError(f"kernel input channels {cg} != {cin}//{groups}")
    tp, hp, wp = t + 2 * pt, h + 2 * ph, wd + 2 * pw
    if kt > tp or kh > hp or kw > wp:
        raise ShapeError(f"kernel ({kt},{kh},{kw}) exceeds padded input ({tp},{hp},{wp})")
    to = (tp - kt) // st + 1
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    og = cout // groups

    xp = np.pad(x.data, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0)))
    # windows: [N, to, ho, wo, C, kt, kh, kw] after stride subsampling
    win = np.lib.stride_tricks.sliding_window_view(xp, (kt, kh, kw), axis=(1, 2, 3))
    win = win[:, ::st, ::sh, ::sw]
    win = win.reshape(n, to, ho, wo, groups, cg, kt, kh, kw)
    w6 = w.data.reshape(kt, kh, kw, cg, groups, og)
    out = np.einsum("nthwgcxyz,xyzcgo->nthwgo", win, w6, optimize=True)
    out = out.reshape(n, to, ho, wo, cout)
    if b is not None:
        out = out + b.data

    def bwd(g):
        g6 = g.reshape(n, to, ho, wo, groups, og)
        gw = np.einsum("nthwgcxyz,nthwgo->xyzcgo", win, g6, optimize=True)
        gw = gw.reshape(w.shape)
        gxp = np.zeros((n, tp, hp, wp, groups, cg), dtype=x.dtype)
        for a in range(kt):
            for bb in range(kh):
                for c in range(kw):
                    contrib = np.einsum("nthwgo,cgo->nthwgc", g6, w6[a, bb, c], optimize=True)
                    gxp[:, a:a + st * to:st, bb:bb + sh * ho:sh, c:c + sw * wo:sw] += contrib
        gx = gxp.reshape(n, tp, hp, wp, cin)[:, pt:pt + t, ph:ph + h, pw:pw + wd]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bwd, "conv3d")


# -- losses / regularization -----------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` [B, C]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects [B, C] logits and [B] labels, got {logits.shape} / {labels.shape}")
    b, c = logits.shape
    xd = logits.data
    shifted = xd - xd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    data = -logp[np.arange(b), labels].mean()

    def bwd(g):
        sm = np.exp(logp)
        sm[np.arange(b), labels] -= 1.0
        return (g * sm / b,)

    return _make(np.asarray(data, dtype=xd.dtype), (logits,), bwd, "cross_entropy")


def dropout(x: Tensor, p: float, seed: int) -> Tensor:
    """Deterministic dropout driven by an explicit seed."""
    if not 0.0 <= p < 1.0:
        raise TensorError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return _make(x.data.copy(), (x,), lambda g: (g,), "dropout")
    rng = np.random.Generator(np.random.Philox(seed))
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# -- backward pass ------------------------------------------------------------------

def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise TensorError(f"backward requires a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen and p._on_path():
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = node.grad + g if node.grad is not None else g.copy()
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p._on_path() or pg is None:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# -- optimizer ------------------------------------------------------------------------

class AdamWState:
    """First/second moment buffers plus step counter for a parameter list."""

    def __init__(self, params):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adamw_step(params, state: AdamWState, lr: float, betas=(0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.0):
    """One decoupled-weight-decay Adam update using each param's .grad.

    With lr == 0 parameters are left bit-identical (moments still advance).
    """
    b1, b2 = betas
    state.t += 1
    t = state.t
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        if lr == 0.0:
            continue
        mhat = state.m[i] / (1 - b1 ** t)
        vhat = state.v[i] / (1 - b2 ** t)
        p.data -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p.data)
        _check_finite(p.data, "adamw_step")
