"""Decoder: deep-to-shallow CBR + upsample + skip concatenation, then a
sigmoid head restoring full resolution with two x2 steps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import CBR, Conv2d, Module


@dataclass
class ProbabilityMap:
    """Per-pixel vessel probabilities, strictly inside (0, 1)."""

    probs: np.ndarray  # [N, 1, H, W]
    source_hw: tuple = field(default=None)  # pre-padding dims, when known


def binarize(probs, threshold=0.5):
    """Strict > threshold, so an all-0.5 map predicts background."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"binarize: threshold must be in (0, 1), got {threshold}")
    arr = probs.probs if isinstance(probs, ProbabilityMap) else np.asarray(probs)
    return (arr > threshold).astype(np.uint8)


class Decoder(Module):
    def __init__(self, chans, rng, dtype=np.float32):
        super().__init__()
        c1, c2, c3, c4 = chans
        self.cbr4 = CBR(c4, c4, rng, dtype=dtype)
        self.cbr3 = CBR(c4 + c3, c3, rng, dtype=dtype)
        self.cbr2 = CBR(c3 + c2, c2, rng, dtype=dtype)
        self.cbr1 = CBR(c2 + c1, c1, rng, dtype=dtype)
        self.head_cbr_a = CBR(c1, c1, rng, dtype=dtype)
        self.head_cbr_b = CBR(c1, c1, rng, dtype=dtype)
        self.head = Conv2d(c1, 1, 1, rng, dtype=dtype)

    def forward(self, skips):
        g1, g2, g3, g4 = skips
        d = self.cbr4(g4)
        d = self.cbr3(T.concat([T.bilinear_upsample(d, 2), g3], axis=1))
        d = self.cbr2(T.concat([T.bilinear_upsample(d, 2), g2], axis=1))
        d = self.cbr1(T.concat([T.bilinear_upsample(d, 2), g1], axis=1))
        d = self.head_cbr_a(T.bilinear_upsample(d, 2))
        d = self.head_cbr_b(T.bilinear_upsample(d, 2))
        return T.sigmoid(self.head(d))
