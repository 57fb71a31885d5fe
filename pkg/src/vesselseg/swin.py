"""Windowed-attention encoder path.

Token maps are [N, h, w, D] tensors kept in spatial-grid form; only the
attention itself flattens windows to matrices. Stage s (1-based) has grid
(H/2^{s+1}, W/2^{s+1}) and dim C*2^{s-1}.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import tensor as T
from .layers import Linear, LayerNorm, Mlp, Module, ModuleList, trunc_normal
from .tensor import ShapeError, Tensor

MASK_FILL = -1e9


def window_partition(t, m):
    """[N, h, w, D] -> [N*(h/m)*(w/m), m*m, D]."""
    n, h, w, d = t.shape
    if h % m or w % m:
        raise ShapeError(f"window_partition: grid ({h},{w}) not divisible by window {m}")
    x = T.reshape(t, (n, h // m, m, w // m, m, d))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (n * (h // m) * (w // m), m * m, d))


def window_reverse(wins, m, n, h, w):
    """Inverse of window_partition (bit-exact round trip)."""
    d = wins.shape[-1]
    x = T.reshape(wins, (n, h // m, w // m, m, m, d))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (n, h, w, d))


def cyclic_shift(t, s):
    """Torus roll of an [N, h, w, D] grid: token (i, j) moves to
    ((i-s) mod h, (j-s) mod w). Negative s rolls back."""
    n, h, w, d = t.shape
    if abs(s) >= min(h, w):
        raise ShapeError(f"cyclic_shift: |s|={abs(s)} must be < min{h, w}")
    x = t
    kh = s % h
    if kh:
        top, bottom = T.split(x, [kh, h - kh], axis=1)
        x = T.concat([bottom, top], axis=1)
    kw = s % w
    if kw:
        left, right = T.split(x, [kw, w - kw], axis=2)
        x = T.concat([right, left], axis=2)
    return x


@lru_cache(maxsize=64)
def shift_attention_mask(h, w, m, s):
    """Additive attention mask for the shifted-window configuration.

    Tokens that originated in different pre-shift regions must not attend to
    each other; their entries are MASK_FILL, same-region pairs are 0.
    Returns a read-only float64 array [nW, m*m, m*m].
    """
    if s == 0:
        nw = (h // m) * (w // m)
        out = np.zeros((nw, m * m, m * m))
        out.flags.writeable = False
        return out
    region = np.zeros((h, w), dtype=np.int64)
    cnt = 0
    for hs in (slice(0, h - m), slice(h - m, h - s), slice(h - s, h)):
        for ws in (slice(0, w - m), slice(w - m, w - s), slice(w - s, w)):
            region[hs, ws] = cnt
            cnt += 1
    # partition region ids exactly like window_partition
    rwin = region.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    diff = rwin[:, :, None] != rwin[:, None, :]
    out = np.where(diff, MASK_FILL, 0.0)
    out.flags.writeable = False
    return out


@lru_cache(maxsize=16)
def _relative_index(m, m_max):
    """[m*m, m*m] indices into a (2*m_max-1)^2 relative-bias table."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij"))
    coords = coords.reshape(2, -1)  # [2, m*m]
    rel = coords[:, :, None] - coords[:, None, :]  # [2, m*m, m*m]
    idx = (rel[0] + m_max - 1) * (2 * m_max - 1) + (rel[1] + m_max - 1)
    idx.flags.writeable = False
    return idx


class WindowAttention(Module):
    """Multi-head self-attention inside non-overlapping windows, with an
    optional learned relative-position bias per head."""

    def __init__(self, dim, heads, max_window, rng, use_rel_pos_bias=True, dtype=np.float32):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"attention dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.max_window = max_window
        self.scale = (dim // heads) ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)
        if use_rel_pos_bias:
            n_rel = (2 * max_window - 1) ** 2
            self.rel_bias = Tensor(trunc_normal(rng, (n_rel, heads), dtype=dtype),
                                   requires_grad=True)
        else:
            self.rel_bias = None

    def attention_probs(self, windows, m, mask=None):
        """Softmax attention matrix [B_, heads, m*m, m*m] plus the value heads."""
        b, l, d = windows.shape
        hd = d // self.heads
        qkv = self.qkv(windows)  # [B_, L, 3D]
        qkv = T.reshape(qkv, (b, l, 3, self.heads, hd))
        qkv = T.permute(qkv, (2, 0, 3, 1, 4))  # [3, B_, heads, L, hd]
        q, k, v = (T.reshape(p, (b, self.heads, l, hd)) for p in T.split(qkv, [1, 1, 1], 0))
        attn = T.matmul(q, T.permute(k, (0, 1, 3, 2))) * self.scale  # [B_, heads, L, L]
        if self.rel_bias is not None:
            idx = _relative_index(m, self.max_window)
            bias = T.index_select(self.rel_bias, idx.reshape(-1), axis=0)  # [L*L, heads]
            bias = T.permute(T.reshape(bias, (l, l, self.heads)), (2, 0, 1))
            bias = T.broadcast_to(T.reshape(bias, (1, self.heads, l, l)), attn.shape)
            attn = attn + bias
        if mask is not None:
            nw = mask.shape[0]
            mt = Tensor(np.asarray(mask, dtype=windows.dtype))
            mt = T.reshape(mt, (1, nw, 1, l, l))
            attn = T.reshape(attn, (b // nw, nw, self.heads, l, l))
            attn = attn + T.broadcast_to(mt, attn.shape)
            attn = T.reshape(attn, (b, self.heads, l, l))
        return T.softmax(attn, -1), v

    def forward(self, windows, m, mask=None):
        b, l, d = windows.shape
        probs, v = self.attention_probs(windows, m, mask)
        out = T.matmul(probs, v)  # [B_, heads, L, hd]
        out = T.reshape(T.permute(out, (0, 2, 1, 3)), (b, l, d))
        return self.proj(out)


class SwinBlock(Module):
    """Pre-norm windowed attention + pre-norm MLP, both with residuals.

    kind 'W' attends over the regular partition; 'SW' cyclically shifts the
    grid by half a window first and masks cross-region pairs. When the grid
    is no larger than the window there is nothing to shift, so 'SW' falls
    back to the regular partition.
    """

    def __init__(self, dim, heads, window, kind, mlp_ratio, rng,
                 use_rel_pos_bias=True, dtype=np.float32):
        super().__init__()
        if kind not in ("W", "SW"):
            raise ValueError(f"swin block kind must be 'W' or 'SW', got {kind!r}")
        self.kind = kind
        self.window = window
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = WindowAttention(dim, heads, window, rng, use_rel_pos_bias, dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, int(round(dim * mlp_ratio)), rng, dtype=dtype)

    def forward(self, x):
        n, h, w, d = x.shape
        m = min(self.window, h, w)
        if h % m or w % m:
            raise ShapeError(f"swin block: grid ({h},{w}) not divisible by window {m}")
        s = m // 2 if (self.kind == "SW" and (h > m or w > m)) else 0

        shortcut = x
        t = self.norm1(x)
        if s:
            t = cyclic_shift(t, s)
        wins = window_partition(t, m)
        mask = shift_attention_mask(h, w, m, s) if s else None
        wins = self.attn(wins, m, mask)
        t = window_reverse(wins, m, n, h, w)
        if s:
            t = cyclic_shift(t, -s)
        x = shortcut + t
        return x + self.mlp(self.norm2(x))


class PatchEmbed(Module):
    """Non-overlapping patch split + linear projection to the embed dim."""

    def __init__(self, patch, in_ch, dim, rng, dtype=np.float32):
        super().__init__()
        self.patch = patch
        self.dim = dim
        raw = in_ch * patch * patch
        self.weight = Tensor(trunc_normal(rng, (raw, dim), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.norm = LayerNorm(dim, dtype=dtype)

    def forward(self, img):
        n, c, h, w = img.shape
        p = self.patch
        if h % p or w % p:
            raise ShapeError(f"patch_embed: image ({h},{w}) not divisible by patch {p}")
        x = T.reshape(img, (n, c, h // p, p, w // p, p))
        x = T.permute(x, (0, 2, 4, 1, 3, 5))  # [N, h', w', C, p, p]
        x = T.reshape(x, (n * (h // p) * (w // p), c * p * p))
        x = T.matmul(x, self.weight)
        b = T.broadcast_to(T.reshape(self.bias, (1, self.dim)), x.shape)
        x = T.reshape(x + b, (n, h // p, w // p, self.dim))
        return self.norm(x)


class PatchMerge(Module):
    """Concatenate each 2x2 token neighborhood (TL, TR, BL, BR), normalize,
    and project 4D -> 2D."""

    def __init__(self, dim, rng, dtype=np.float32):
        super().__init__()
        self.norm = LayerNorm(4 * dim, dtype=dtype)
        self.reduce = Linear(4 * dim, 2 * dim, rng, bias=False, dtype=dtype)

    def forward(self, x):
        n, h, w, d = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"patch_merge: grid ({h},{w}) must be even")
        x = T.reshape(x, (n, h // 2, 2, w // 2, 2, d))
        x = T.permute(x, (0, 1, 3, 2, 4, 5))
        x = T.reshape(x, (n, h // 2, w // 2, 4 * d))
        return self.reduce(self.norm(x))


class SwinEncoder(Module):
    """Four stages of windowed-attention blocks with patch merging between
    them; returns the token map of every stage."""

    def __init__(self, cfg, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.embed = PatchEmbed(cfg.patch_size, cfg.in_channels, cfg.embed_dim, rng, dtype)
        stages = []
        merges = []
        for i in range(4):
            dim = cfg.embed_dim * (2 ** i)
            blocks = ModuleList([
                SwinBlock(dim, cfg.swin_heads[i], cfg.window,
                          "W" if j % 2 == 0 else "SW",
                          cfg.mlp_ratio, rng, cfg.use_rel_pos_bias, dtype)
                for j in range(cfg.swin_depths[i])
            ])
            stages.append(blocks)
            if i < 3:
                merges.append(PatchMerge(dim, rng, dtype))
        self.stages = ModuleList(stages)
        self.merges = ModuleList(merges)

    def forward(self, img):
        x = self.embed(img)
        outs = []
        for i, blocks in enumerate(self.stages):
            for blk in blocks:
                x = blk(x)
            outs.append(x)
            if i < 3:
                x = self.merges[i](x)
        return outs
