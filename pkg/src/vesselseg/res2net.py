"""Multi-scale residual encoder path.

Stem: stride-2 CBR + 2x2 max pool down to H/4, then four stages of
residual blocks (4, 6, 9, 2 of them by default) whose channel groups chain
3x3 convolutions hierarchically, widening the receptive field group by
group.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import CBR, Conv2d, Module, ModuleList
from .tensor import ShapeError


class Res2Block(Module):
    """Split-and-chain residual block with 4 channel groups.

    1x1 reduce -> split g1..g4 -> y1 = g1, yi = conv3x3(gi + y_{i-1}) ->
    concat -> 1x1 expand -> + residual branch -> ReLU. A stride-2 block
    carries the stride on the leading 1x1 conv and on the residual
    projection so every group keeps a common resolution.
    """

    SCALE = 4

    def __init__(self, in_ch, out_ch, rng, stride=1, dtype=np.float32):
        super().__init__()
        if out_ch % self.SCALE:
            raise ShapeError(f"res2 block width {out_ch} not divisible by {self.SCALE}")
        gw = out_ch // self.SCALE
        self.group_width = gw
        self.reduce = Conv2d(in_ch, out_ch, 1, rng, stride=stride, dtype=dtype)
        self.group_convs = ModuleList([
            Conv2d(gw, gw, 3, rng, pad=1, dtype=dtype) for _ in range(self.SCALE - 1)
        ])
        self.expand = Conv2d(out_ch, out_ch, 1, rng, dtype=dtype)
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, rng, stride=stride, dtype=dtype)
        else:
            self.proj = None

    def group_outputs(self, x):
        """y1..y4 after the hierarchical 3x3 chain (pre-concat)."""
        t = self.reduce(x)
        groups = T.split(t, [self.group_width] * self.SCALE, axis=1)
        ys = [groups[0]]
        for i in range(1, self.SCALE):
            ys.append(self.group_convs[i - 1](groups[i] + ys[-1]))
        return ys

    def forward(self, x):
        ys = self.group_outputs(x)
        out = self.expand(T.concat(ys, axis=1))
        res = x if self.proj is None else self.proj(x)
        return T.relu(out + res)


class ResEncoder(Module):
    """CBR stem + max pool, then the four residual stages at H/4..H/32."""

    def __init__(self, cfg, rng, dtype=np.float32):
        super().__init__()
        chans = cfg.stage_channels
        self.stem = CBR(cfg.in_channels, chans[0], rng, stride=2, dtype=dtype)
        stages = []
        in_ch = chans[0]
        for i in range(4):
            blocks = []
            for j in range(cfg.res_depths[i]):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(Res2Block(in_ch, chans[i], rng, stride=stride, dtype=dtype))
                in_ch = chans[i]
            stages.append(ModuleList(blocks))
        self.stages = ModuleList(stages)

    def forward(self, img):
        x = self.stem(img)          # H/2
        x = T.maxpool2d(x, 2, 2)    # H/4
        outs = []
        for blocks in self.stages:
            for blk in blocks:
                x = blk(x)
            outs.append(x)
        return outs
