"""Redundancy reduction on the skip pyramid.

Each pass CBR-refreshes every level and replaces levels 1..3 with the
absolute difference between their own CBR map and the bilinearly upsampled
CBR map of the next-coarser level (whose CBR also projects 2C -> C so the
subtraction is well typed). The deepest level has no coarser neighbor and
keeps the CBR refresh only. Passes stack, each with its own weights.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import CBR, Module, ModuleList
from .tensor import ShapeError


class ReducePass(Module):
    def __init__(self, chans, rng, dtype=np.float32):
        super().__init__()
        self.fine = ModuleList([CBR(c, c, rng, dtype=dtype) for c in chans])
        self.coarse = ModuleList([
            CBR(chans[k + 1], chans[k], rng, dtype=dtype) for k in range(len(chans) - 1)
        ])

    def forward(self, maps):
        n = len(maps)
        for k in range(n - 1):
            fh, fw = maps[k].shape[2:]
            ch, cw = maps[k + 1].shape[2:]
            if (fh, fw) != (2 * ch, 2 * cw):
                raise ShapeError(
                    f"reduce_pass: level {k + 2} {maps[k + 1].shape} is not half of "
                    f"level {k + 1} {maps[k].shape}")
        out = []
        for k in range(n):
            fine = self.fine[k](maps[k])
            if k < n - 1:
                coarse = T.bilinear_upsample(self.coarse[k](maps[k + 1]), 2)
                out.append(T.tabs(fine - coarse))
            else:
                out.append(fine)
        return out


class SkipReducer(Module):
    """P stacked reduction passes (default 2: one per written prime level)."""

    def __init__(self, chans, rng, passes=2, dtype=np.float32):
        super().__init__()
        if passes < 1:
            raise ShapeError(f"skip reduction needs passes >= 1, got {passes}")
        self.passes = ModuleList([ReducePass(chans, rng, dtype) for _ in range(passes)])

    def forward(self, pyramid):
        maps = pyramid
        for p in self.passes:
            maps = p(maps)
        return maps
