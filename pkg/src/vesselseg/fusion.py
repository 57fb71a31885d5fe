"""Per-stage fusion of the two encoder paths.

Each stage's token map and residual map (plus, from stage 2 on, the
previous stage's fused output, brought down to scale by a stride-2 CBR) are
individually CBR-projected, concatenated on channels and reduced by a final
CBR. The deepest stage additionally runs a gated-convolution block that
mixes space with multiplicative high-order interactions.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import CBR, ChannelLayerNorm, Conv2d, Module, ModuleList
from .tensor import ShapeError


def gnconv_split_plan(ch, order):
    """Channel widths per interaction order: ch/2^(order-1-i), doubling up
    to ch. Requires ch divisible by 2^(order-1)."""
    if order < 1:
        raise ShapeError(f"gnconv order must be >= 1, got {order}")
    if ch % (2 ** (order - 1)):
        raise ShapeError(f"gnconv width {ch} not divisible by 2^{order - 1}")
    return [ch // (2 ** (order - 1 - i)) for i in range(order)]


class GnConv(Module):
    """Recursive gated convolution.

    proj_in makes a gate stack (p0) and a feature stack (q); a depthwise
    conv mixes q spatially; each order multiplies the (pointwise-projected)
    gate with its slice of the conv output. Resolution is preserved.
    """

    def __init__(self, ch, rng, order=3, dw_kernel=7, dtype=np.float32):
        super().__init__()
        self.order = order
        self.dims = gnconv_split_plan(ch, order)
        total = sum(self.dims)
        self.proj_in = Conv2d(ch, self.dims[0] + total, 1, rng, dtype=dtype)
        self.dwconv = Conv2d(total, total, dw_kernel, rng, pad=dw_kernel // 2,
                             groups=total, dtype=dtype)
        self.pw_convs = ModuleList([
            Conv2d(self.dims[i], self.dims[i + 1], 1, rng, dtype=dtype)
            for i in range(order - 1)
        ])
        self.proj_out = Conv2d(ch, ch, 1, rng, dtype=dtype)

    def forward(self, x):
        t = self.proj_in(x)
        p, q = T.split(t, [self.dims[0], sum(self.dims)], axis=1)
        q = self.dwconv(q)
        qs = T.split(q, self.dims, axis=1)
        p = p * qs[0]
        for i in range(self.order - 1):
            p = self.pw_convs[i](p) * qs[i + 1]
        return self.proj_out(p)


class HorBlock(Module):
    """Pre-norm residual pair: x + gnconv(norm(x)), then x + mlp(norm(x)).

    Norms are per-site channel layernorms so the block is batch-size
    independent; the MLP is a pointwise conv pair with GELU.
    """

    def __init__(self, ch, rng, order=3, dw_kernel=7, mlp_ratio=4, dtype=np.float32):
        super().__init__()
        self.norm1 = ChannelLayerNorm(ch, dtype=dtype)
        self.gnconv = GnConv(ch, rng, order, dw_kernel, dtype)
        self.norm2 = ChannelLayerNorm(ch, dtype=dtype)
        hidden = int(round(ch * mlp_ratio))
        self.mlp_fc1 = Conv2d(ch, hidden, 1, rng, dtype=dtype)
        self.mlp_fc2 = Conv2d(hidden, ch, 1, rng, dtype=dtype)

    def forward(self, x):
        x = x + self.gnconv(self.norm1(x))
        return x + self.mlp_fc2(T.gelu(self.mlp_fc1(self.norm2(x))))


class FuBlock(Module):
    """CBR-project each input to the stage width, align the previous fused
    map with a stride-2 CBR, concatenate on channels, reduce with a CBR."""

    def __init__(self, swin_ch, res_ch, out_ch, rng, prev_ch=None, dtype=np.float32):
        super().__init__()
        self.cbr_swin = CBR(swin_ch, out_ch, rng, dtype=dtype)
        self.cbr_res = CBR(res_ch, out_ch, rng, dtype=dtype)
        n_in = 2
        if prev_ch is not None:
            self.cbr_prev = CBR(prev_ch, out_ch, rng, stride=2, dtype=dtype)
            n_in = 3
        else:
            self.cbr_prev = None
        self.cbr_out = CBR(n_in * out_ch, out_ch, rng, dtype=dtype)

    def forward(self, s_map, r_map, prev=None):
        if s_map.shape[2:] != r_map.shape[2:]:
            raise ShapeError(
                f"fu_block: path maps misaligned {s_map.shape} vs {r_map.shape}")
        parts = [self.cbr_swin(s_map), self.cbr_res(r_map)]
        if self.cbr_prev is not None:
            if prev is None:
                raise ShapeError("fu_block: missing previous-stage input")
            parts.append(self.cbr_prev(prev))
        elif prev is not None:
            raise ShapeError("fu_block: stage 1 takes no previous-stage input")
        return self.cbr_out(T.concat(parts, axis=1))


class EncoderFusion(Module):
    """Fu-Blocks 1..4 over the per-stage path outputs; only the deepest
    output passes through the gated-convolution block."""

    def __init__(self, cfg, rng, dtype=np.float32):
        super().__init__()
        chans = cfg.stage_channels
        swin_chans = [cfg.embed_dim * (2 ** i) for i in range(4)]
        blocks = []
        for k in range(4):
            prev_ch = chans[k - 1] if k > 0 else None
            blocks.append(FuBlock(swin_chans[k], chans[k], chans[k], rng,
                                  prev_ch=prev_ch, dtype=dtype))
        self.blocks = ModuleList(blocks)
        self.hor = HorBlock(chans[3], rng, cfg.gnconv_order, cfg.gnconv_kernel,
                            dtype=dtype)

    def forward(self, swin_maps, res_maps):
        """Token maps [N, h, w, D] + residual maps [N, C, h, w] -> fused
        pyramid [f1..f4] of [N, C_k, h_k, w_k]."""
        fused = []
        prev = None
        for k in range(4):
            s_map = T.permute(swin_maps[k], (0, 3, 1, 2))  # to [N, D, h, w]
            f = self.blocks[k](s_map, res_maps[k], prev)
            if k == 3:
                f = self.hor(f)
            fused.append(f)
            prev = f
        return fused
