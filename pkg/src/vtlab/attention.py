"""Attention and aggregation mechanisms over spatiotemporal token grids.

Pure functions over (grid, parameters): global attention, windowed and
shifted-window attention with relative position bias, pooled attention with
decomposed relative position embedding, and local/global relation
aggregation. Parameters are plain containers of leaf tensors so the same
code serves forward passes and gradient checks.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ContractError, GeometryError
from .tensor import Tensor


def mask_fill_value(dtype) -> float:
    """Additive mask constant: zeroes softmax without producing inf - inf."""
    return -1e18 if np.dtype(dtype) == np.float64 else -1e9


# ---------------------------------------------------------------------------
# domain types


@dataclass
class TokenGrid:
    """Embedded visual tokens retaining (T', H', W') structure."""

    tokens: Tensor  # [N, T', H', W', D]
    patch: tuple = (1, 1, 1)

    def __post_init__(self):
        if self.tokens.ndim != 5:
            raise GeometryError(f"TokenGrid expects 5-D tokens, got {self.tokens.shape}")

    @property
    def extents(self):
        return self.tokens.shape[1:4]

    @property
    def dim(self):
        return self.tokens.shape[4]


@dataclass(frozen=True)
class WindowSpec:
    """Window extents plus the cyclic shift (zero or half-window per axis)."""

    window: tuple
    shift: tuple = (0, 0, 0)

    def __post_init__(self):
        w = tuple(int(x) for x in self.window)
        s = tuple(int(x) for x in self.shift)
        object.__setattr__(self, "window", w)
        object.__setattr__(self, "shift", s)
        if len(w) != 3 or any(x < 1 for x in w):
            raise ConfigError(f"window extents must be 3 positive ints, got {w}")
        half = tuple(x // 2 for x in w)
        if s != (0, 0, 0) and s != half:
            raise ConfigError(f"shift must be zero or half-window {half}, got {s}")

    @property
    def shifted(self) -> bool:
        return self.shift != (0, 0, 0)

    @property
    def tokens_per_window(self) -> int:
        return int(np.prod(self.window))


@dataclass
class AttentionMask:
    """Per-window connectivity: True where attention is blocked."""

    blocked: np.ndarray  # bool [nw, L, L]

    def additive(self, dtype) -> np.ndarray:
        return np.where(self.blocked, mask_fill_value(dtype), 0.0).astype(dtype)


def _relpos_index(window) -> np.ndarray:
    """Flat table index for every ordered pair of window positions.

    Depends only on coordinate differences, so it is shift-invariant.
    """
    wt, wh, ww = window
    coords = np.array(list(itertools.product(range(wt), range(wh), range(ww))))
    delta = coords[:, None, :] - coords[None, :, :]  # [L, L, 3]
    dt = delta[..., 0] + wt - 1
    dh = delta[..., 1] + wh - 1
    dw = delta[..., 2] + ww - 1
    return dt * (2 * wh - 1) * (2 * ww - 1) + dh * (2 * ww - 1) + dw


@dataclass
class RelPosBiasTable:
    """Learned per-head bias table keyed by in-window coordinate offsets."""

    table: Tensor  # [(2Wt-1)(2Wh-1)(2Ww-1), heads]
    window: tuple
    index: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        wt, wh, ww = self.window
        expect = (2 * wt - 1) * (2 * wh - 1) * (2 * ww - 1)
        if self.table.shape[0] != expect:
            raise ConfigError(f"bias table rows {self.table.shape[0]} != {expect} for window {self.window}")
        if self.index is None:
            self.index = _relpos_index(self.window)

    @classmethod
    def create(cls, window, heads: int, rng: np.random.Generator, dtype=np.float32,
               std: float = 0.02) -> "RelPosBiasTable":
        wt, wh, ww = window
        rows = (2 * wt - 1) * (2 * wh - 1) * (2 * ww - 1)
        data = (rng.standard_normal((rows, heads)) * std).astype(dtype)
        return cls(table=tt.parameter(data), window=tuple(window))

    def bias(self) -> Tensor:
        """Per-head [heads, L, L] additive bias for one window."""
        l = self.index.shape[0]
        flat = tt.gather(self.table, self.index.reshape(-1))  # [L*L, heads]
        return tt.permute(tt.reshape(flat, (l, l, self.table.shape[1])), (2, 0, 1))


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class AttentionParams:
    """Projection weights for one multi-head attention operator."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator, dtype=np.float32,
               std: float = 0.02) -> "AttentionParams":
        def w():
            return tt.parameter((rng.standard_normal((dim, dim)) * std).astype(dtype))

        def b():
            return tt.parameter(np.zeros(dim, dtype=dtype))

        return cls(w(), b(), w(), b(), w(), b(), w(), b())

    def leaves(self):
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]


@dataclass
class BlockParams:
    """Pre-norm transformer block: attention sublayer + 4x GELU MLP."""

    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttentionParams
    ln2_g: Tensor
    ln2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator, dtype=np.float32,
               mlp_ratio: int = 4, std: float = 0.02) -> "BlockParams":
        hid = dim * mlp_ratio
        return cls(
            ln1_g=tt.parameter(np.ones(dim, dtype=dtype)),
            ln1_b=tt.parameter(np.zeros(dim, dtype=dtype)),
            attn=AttentionParams.create(dim, rng, dtype, std),
            ln2_g=tt.parameter(np.ones(dim, dtype=dtype)),
            ln2_b=tt.parameter(np.zeros(dim, dtype=dtype)),
            mlp_w1=tt.parameter((rng.standard_normal((dim, hid)) * std).astype(dtype)),
            mlp_b1=tt.parameter(np.zeros(hid, dtype=dtype)),
            mlp_w2=tt.parameter((rng.standard_normal((hid, dim)) * std).astype(dtype)),
            mlp_b2=tt.parameter(np.zeros(dim, dtype=dtype)),
        )

    def leaves(self):
        return [self.ln1_g, self.ln1_b, *self.attn.leaves(), self.ln2_g, self.ln2_b,
                self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2]


# ---------------------------------------------------------------------------
# core attention


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         params: AttentionParams, bias: Tensor | None = None,
                         mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over [B, L, D] with per-head bias/mask."""
    qp = tt.linear(q, params.wq, params.bq)
    kp = tt.linear(k, params.wk, params.bk)
    vp = tt.linear(v, params.wv, params.bv)
    return _attention_core(qp, kp, vp, heads, params.wo, params.bo, bias, mask)


def _attention_core(qp: Tensor, kp: Tensor, vp: Tensor, heads: int, wo: Tensor,
                    bo: Tensor, bias: Tensor | None, mask: np.ndarray | None) -> Tensor:
    b, lq, d = qp.shape
    lk = kp.shape[1]
    if d % heads:
        raise ConfigError(f"embedding width {d} not divisible by heads={heads}")
    dh = d // heads

    def split(x, l):
        return tt.permute(tt.reshape(x, (x.shape[0], l, heads, dh)), (0, 2, 1, 3))

    qh = split(qp, lq)  # [B, h, Lq, dh]
    kh = split(kp, lk)
    vh = split(vp, lk)
    scores = tt.matmul(qh, tt.permute(kh, (0, 1, 3, 2)))
    scores = tt.mul(scores, Tensor(np.asarray(1.0 / np.sqrt(dh), dtype=qp.dtype)))
    if bias is not None:
        scores = tt.add(scores, bias)
    if mask is not None:
        scores = tt.add(scores, Tensor(np.asarray(mask, dtype=qp.dtype)))
    weights = tt.softmax(scores, axis=-1)
    ctx = tt.matmul(weights, vh)  # [B, h, Lq, dh]
    ctx = tt.reshape(tt.permute(ctx, (0, 2, 1, 3)), (b, lq, d))
    return tt.linear(ctx, wo, bo)


# ---------------------------------------------------------------------------
# window machinery


def _check_divisible(extents, window):
    names = "THW"
    for i, (e, w) in enumerate(zip(extents, window)):
        if e % w:
            raise GeometryError(f"grid axis {names[i]}={e} not divisible by window {w}")


def window_partition(x: Tensor, window) -> Tensor:
    """[N, T, H, W, D] -> [N * nw, Wt*Wh*Ww, D], lossless scan-order rearrangement."""
    n, t, h, w, d = x.shape
    wt, wh, ww = window
    _check_divisible((t, h, w), window)
    x = tt.reshape(x, (n, t // wt, wt, h // wh, wh, w // ww, ww, d))
    x = tt.permute(x, (0, 1, 3, 5, 2, 4, 6, 7))
    nw = (t // wt) * (h // wh) * (w // ww)
    return tt.reshape(x, (n * nw, wt * wh * ww, d))


def window_reverse(windows: Tensor, window, extents, n: int) -> Tensor:
    """Inverse of window_partition."""
    t, h, w = extents
    wt, wh, ww = window
    d = windows.shape[-1]
    x = tt.reshape(windows, (n, t // wt, h // wh, w // ww, wt, wh, ww, d))
    x = tt.permute(x, (0, 1, 4, 2, 5, 3, 6, 7))
    return tt.reshape(x, (n, t, h, w, d))


def _axis_region_labels(extent: int, window: int, shift: int) -> np.ndarray:
    """Shifted-partition interval index for each coordinate along one axis."""
    u = np.arange(extent)
    if shift == 0:
        return u // window
    head = window - shift
    return np.where(u < head, 0, (u - head) // window + 1)


def _window_labels(extents, window, shift, valid_extents=None) -> np.ndarray:
    """Combined region label per grid position, rolled like the tokens.

    Padded positions (beyond valid_extents) get label -1 so they are blocked
    from every real token.
    """
    lt = _axis_region_labels(extents[0], window[0], shift[0])
    lh = _axis_region_labels(extents[1], window[1], shift[1])
    lw = _axis_region_labels(extents[2], window[2], shift[2])
    base = max(int(lh.max()), int(lw.max())) + 2
    lab = (lt[:, None, None] * base + lh[None, :, None]) * base + lw[None, None, :]
    if valid_extents is not None:
        vt, vh, vw = valid_extents
        lab = lab.copy()
        lab[vt:, :, :] = -1
        lab[:, vh:, :] = -1
        lab[:, :, vw:] = -1
    lab = np.roll(lab, tuple(-s for s in shift), axis=(0, 1, 2))
    return lab


def _labels_to_mask(lab: np.ndarray, window) -> np.ndarray:
    """Partition a label grid into windows; blocked[i, j] = labels differ."""
    t, h, w = lab.shape
    wt, wh, ww = window
    lw = lab.reshape(t // wt, wt, h // wh, wh, w // ww, ww)
    lw = lw.transpose(0, 2, 4, 1, 3, 5).reshape(-1, wt * wh * ww)
    return lw[:, :, None] != lw[:, None, :]


def build_shift_mask(extents, spec: WindowSpec) -> AttentionMask:
    """Connectivity mask for shifted windows on divisible, unpadded extents."""
    if not spec.shifted:
        raise ContractError("build_shift_mask requires a nonzero shift; zero-shift callers skip masking")
    _check_divisible(extents, spec.window)
    lab = _window_labels(extents, spec.window, spec.shift)
    return AttentionMask(blocked=_labels_to_mask(lab, spec.window))


def _pad_to_multiple(x: Tensor, window):
    n, t, h, w, d = x.shape
    need = tuple((-e) % wi for e, wi in zip((t, h, w), window))
    if need == (0, 0, 0):
        return x, (t, h, w)
    x = tt.pad(x, ((0, 0), (0, need[0]), (0, need[1]), (0, need[2]), (0, 0)))
    return x, (t + need[0], h + need[1], w + need[2])


def shifted_window_attention(grid: TokenGrid, spec: WindowSpec,
                             table: RelPosBiasTable | None,
                             params: AttentionParams, heads: int) -> TokenGrid:
    """Windowed attention with cyclic shift, mask, attend, shift back.

    Non-divisible extents are zero-padded and the padded positions are
    masked out of attention.
    """
    x = grid.tokens
    n = x.shape[0]
    orig = x.shape[1:4]
    x, padded = _pad_to_multiple(x, spec.window)
    shift = spec.shift
    if spec.shifted:
        x = tt.roll(x, tuple(-s for s in shift), axes=(1, 2, 3))

    needs_mask = spec.shifted or padded != tuple(orig)
    mask = None
    if needs_mask:
        lab = _window_labels(padded, spec.window, shift,
                             valid_extents=orig if padded != tuple(orig) else None)
        blocked = _labels_to_mask(lab, spec.window)  # [nw, L, L]
        add = np.where(blocked, mask_fill_value(x.dtype), 0.0).astype(x.dtype)
        mask = np.tile(add[None, :, None, :, :], (n, 1, 1, 1, 1)).reshape(
            n * add.shape[0], 1, add.shape[1], add.shape[2])

    windows = window_partition(x, spec.window)
    bias = table.bias() if table is not None else None
    out = multi_head_attention(windows, windows, windows, heads, params,
                               bias=bias, mask=mask)
    x = window_reverse(out, spec.window, padded, n)
    if spec.shifted:
        x = tt.roll(x, shift, axes=(1, 2, 3))
    if padded != tuple(orig):
        x = tt.slice_(x, (slice(None), slice(0, orig[0]), slice(0, orig[1]),
                          slice(0, orig[2]), slice(None)))
    return TokenGrid(tokens=x, patch=grid.patch)


# ---------------------------------------------------------------------------
# global attention / MHRA


def global_st_attention(grid: TokenGrid, params: AttentionParams, heads: int) -> TokenGrid:
    """Full spatio-temporal attention over all tokens of the grid."""
    x = grid.tokens
    n, t, h, w, d = x.shape
    flat = tt.reshape(x, (n, t * h * w, d))
    out = multi_head_attention(flat, flat, flat, heads, params)
    return TokenGrid(tokens=tt.reshape(out, (n, t, h, w, d)), patch=grid.patch)


def global_mhra(grid: TokenGrid, params: AttentionParams, heads: int) -> TokenGrid:
    """Global relation aggregation; same contract as global attention."""
    return global_st_attention(grid, params, heads)


@dataclass
class LocalMhraParams:
    """Value projection, depthwise relation kernel, pointwise mix."""

    wv: Tensor
    bv: Tensor
    rel: Tensor  # [kt, kh, kw, 1, D] depthwise
    wo: Tensor
    bo: Tensor

    @classmethod
    def create(cls, dim: int, kernel, rng: np.random.Generator, dtype=np.float32,
               std: float = 0.02) -> "LocalMhraParams":
        kt, kh, kw = kernel
        return cls(
            wv=tt.parameter((rng.standard_normal((dim, dim)) * std).astype(dtype)),
            bv=tt.parameter(np.zeros(dim, dtype=dtype)),
            rel=tt.parameter((rng.standard_normal((kt, kh, kw, 1, dim)) * std
                              + 1.0 / (kt * kh * kw)).astype(dtype)),
            wo=tt.parameter((rng.standard_normal((dim, dim)) * std).astype(dtype)),
            bo=tt.parameter(np.zeros(dim, dtype=dtype)),
        )

    def leaves(self):
        return [self.wv, self.bv, self.rel, self.wo, self.bo]


def local_mhra(grid: TokenGrid, kernel, params: LocalMhraParams) -> TokenGrid:
    """Local relation aggregation: depthwise 3D conv over projected values."""
    kt, kh, kw = kernel
    if kt % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"local relation kernel must have odd extents, got {kernel}")
    x = grid.tokens
    d = x.shape[-1]
    v = tt.linear(x, params.wv, params.bv)
    rel = tt.conv3d(v, params.rel, stride=1, padding=(kt // 2, kh // 2, kw // 2), groups=d)
    out = tt.linear(rel, params.wo, params.bo)
    return TokenGrid(tokens=out, patch=grid.patch)


# ---------------------------------------------------------------------------
# pooled attention with decomposed relative position bias


def decomposed_relpos_bias(q_coords: np.ndarray, kv_coords: np.ndarray, tables) -> Tensor:
    """bias[h, i, j] = bT[dt] + bH[dh] + bW[dw] from per-axis tables.

    Tables are [2*extent - 1, heads]; coordinates are integer [L, 3] in the
    unpooled grid's units, so the bias depends only on coordinate differences.
    """
    heads = tables[0].shape[1]
    lq, lk = len(q_coords), len(kv_coords)
    total = None
    for axis, table in enumerate(tables):
        extent = (table.shape[0] + 1) // 2
        delta = q_coords[:, axis][:, None] - kv_coords[:, axis][None, :] + extent - 1
        if delta.min() < 0 or delta.max() >= table.shape[0]:
            raise tt.ShapeError(
                f"relative coordinate out of table range on axis {axis} "
                f"(table rows {table.shape[0]})")
        part = tt.gather(table, delta.reshape(-1))
        total = part if total is None else tt.add(total, part)
    return tt.permute(tt.reshape(total, (lq, lk, heads)), (2, 0, 1))


@dataclass
class PooledAttentionParams:
    """Attention projections plus learned depthwise pooling and axis bias tables."""

    attn: AttentionParams
    q_pool: Tensor | None  # [st, sh, sw, 1, D], kernel == stride
    kv_pool: Tensor | None
    tables: tuple | None  # (bT, bH, bW), each [2*extent-1, heads]

    @classmethod
    def create(cls, dim: int, heads: int, extents, q_stride, kv_stride,
               rng: np.random.Generator, dtype=np.float32, std: float = 0.02,
               use_bias_tables: bool = True) -> "PooledAttentionParams":
        def pool(stride):
            if tuple(stride) == (1, 1, 1):
                w = np.ones((1, 1, 1, 1, dim), dtype=dtype)
            else:
                st, sh, sw = stride
                w = np.full((st, sh, sw, 1, dim), 1.0 / (st * sh * sw), dtype=dtype)
            return tt.parameter(w)

        tables = None
        if use_bias_tables:
            tables = tuple(
                tt.parameter((rng.standard_normal((2 * e - 1, heads)) * std).astype(dtype))
                for e in extents)
        return cls(attn=AttentionParams.create(dim, rng, dtype, std),
                   q_pool=pool(q_stride), kv_pool=pool(kv_stride), tables=tables)

    def leaves(self):
        out = list(self.attn.leaves()) + [self.q_pool, self.kv_pool]
        if self.tables is not None:
            out += list(self.tables)
        return out


def _grid_coords(extents, stride) -> np.ndarray:
    axes = [np.arange(0, e, s) for e, s in zip(extents, stride)]
    return np.array(list(itertools.product(*axes)))


def _pooled_extents(extents, stride):
    out = []
    for e, s in zip(extents, stride):
        if s < 1 or s > e:
            raise GeometryError(f"pool stride {s} invalid for extent {e}")
        if e % s:
            raise GeometryError(f"extent {e} not divisible by pool stride {s}")
        out.append(e // s)
    return tuple(out)


def pooled_attention(grid: TokenGrid, q_stride, kv_stride,
                     params: PooledAttentionParams, heads: int) -> TokenGrid:
    """Attention with strided depthwise pooling on Q, K, V.

    The output grid adopts the Q-pooled resolution. The caller owns the
    residual path (pool it with mean_pool to match).
    """
    x = grid.tokens
    n, t, h, w, d = x.shape
    extents = (t, h, w)
    q_stride = tuple(q_stride)
    kv_stride = tuple(kv_stride)
    q_ext = _pooled_extents(extents, q_stride)
    kv_ext = _pooled_extents(extents, kv_stride)

    def project_pool(wm, bm, pool_w, stride, ext):
        y = tt.linear(x, wm, bm)
        dout = y.shape[-1]
        if tuple(stride) != (1, 1, 1):
            y = tt.conv3d(y, pool_w, stride=stride, padding=0, groups=dout)
        elif pool_w is not None:
            y = tt.conv3d(y, pool_w, stride=1, padding=0, groups=dout)
        return tt.reshape(y, (n, int(np.prod(ext)), dout))

    ap = params.attn
    qp = project_pool(ap.wq, ap.bq, params.q_pool, q_stride, q_ext)
    kp = project_pool(ap.wk, ap.bk, params.kv_pool, kv_stride, kv_ext)
    vp = project_pool(ap.wv, ap.bv, params.kv_pool, kv_stride, kv_ext)

    bias = None
    if params.tables is not None:
        qc = _grid_coords(extents, q_stride)
        kc = _grid_coords(extents, kv_stride)
        bias = decomposed_relpos_bias(qc, kc, params.tables)

    out = _attention_core(qp, kp, vp, heads, ap.wo, ap.bo, bias, None)
    out = tt.reshape(out, (n, *q_ext, out.shape[-1]))
    return TokenGrid(tokens=out, patch=grid.patch)


def mean_pool(x: Tensor, stride) -> Tensor:
    """Non-learned strided mean pooling of a [N, T, H, W, D] tensor."""
    n, t, h, w, d = x.shape
    st, sh, sw = stride
    _pooled_extents((t, h, w), stride)
    x = tt.reshape(x, (n, t // st, st, h // sh, sh, w // sw, sw, d))
    return tt.mean(x, axis=(2, 4, 6))


# ---------------------------------------------------------------------------
# transformer block and factorized encoder


def transformer_block(x: Tensor, params: BlockParams, heads: int,
                      bias: Tensor | None = None,
                      mask: np.ndarray | None = None) -> Tensor:
    """Pre-norm global attention + MLP with residuals, over [B, L, D]."""
    y = tt.layer_norm(x, params.ln1_g, params.ln1_b)
    x = tt.add(x, multi_head_attention(y, y, y, heads, params.attn, bias=bias, mask=mask))
    y = tt.layer_norm(x, params.ln2_g, params.ln2_b)
    y = tt.linear(tt.gelu(tt.linear(y, params.mlp_w1, params.mlp_b1)),
                  params.mlp_w2, params.mlp_b2)
    return tt.add(x, y)


def frame_representations(grid: TokenGrid, spatial_blocks, heads: int,
                          cls_token: Tensor | None = None) -> Tensor:
    """Per-frame spatial encoding -> [N, T', D].

    With a class token the frame representation is the token's final state;
    otherwise spatial tokens are mean-pooled.
    """
    x = grid.tokens
    n, t, h, w, d = x.shape
    frames = tt.reshape(x, (n * t, h * w, d))
    if cls_token is not None:
        zeros = Tensor(np.zeros((n * t, 1, d), dtype=x.dtype))
        cls = tt.add(zeros, cls_token)  # broadcast the learned token
        frames = tt.concat([cls, frames], axis=1)
    for bp in spatial_blocks:
        frames = transformer_block(frames, bp, heads)
    if cls_token is not None:
        rep = tt.slice_(frames, (slice(None), slice(0, 1), slice(None)))
        rep = tt.reshape(rep, (n * t, d))
    else:
        rep = tt.mean(frames, axis=1)
    return tt.reshape(rep, (n, t, d))


def factorized_encoder(grid: TokenGrid, spatial_blocks, temporal_blocks, heads: int,
                       cls_token: Tensor | None = None) -> Tensor:
    """Spatial-then-temporal factorized encoding -> clip representation [N, D]."""
    reps = frame_representations(grid, spatial_blocks, heads, cls_token)
    for bp in temporal_blocks:
        reps = transformer_block(reps, bp, heads)
    return tt.mean(reps, axis=1)
