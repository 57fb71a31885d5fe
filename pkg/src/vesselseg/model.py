"""Full segmentation model: two encoder paths, per-stage fusion, skip
redundancy reduction and the decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import Decoder
from .fusion import EncoderFusion
from .layers import Module
from .res2net import ResEncoder
from .skips import SkipReducer
from .swin import SwinEncoder


class ConfigError(ValueError):
    """Invalid or inconsistent model configuration."""


@dataclass
class ModelConfig:
    """Every architectural hyperparameter of the model."""

    patch_size: int = 4
    in_channels: int = 3
    embed_dim: int = 24
    window: int = 4
    swin_depths: tuple = (2, 2, 6, 2)
    swin_heads: tuple = (3, 6, 12, 24)
    mlp_ratio: float = 4.0
    use_rel_pos_bias: bool = True
    stage_channels: tuple = (24, 48, 96, 192)
    res_depths: tuple = (4, 6, 9, 2)
    gnconv_order: int = 3
    gnconv_kernel: int = 7
    reduce_passes: int = 2

    def validate(self):
        if self.patch_size != 4:
            raise ConfigError("patch_size must be 4 (both paths downsample to H/4)")
        if self.window < 2 or self.window % 2:
            raise ConfigError(f"window must be even and >= 2, got {self.window}")
        for name in ("swin_depths", "swin_heads", "stage_channels", "res_depths"):
            val = getattr(self, name)
            if len(val) != 4 or any(v < 1 for v in val):
                raise ConfigError(f"{name} must be 4 positive ints, got {val}")
        for i in range(4):
            dim = self.embed_dim * (2 ** i)
            if dim % self.swin_heads[i]:
                raise ConfigError(
                    f"stage {i + 1} dim {dim} not divisible by {self.swin_heads[i]} heads")
        for c in self.stage_channels:
            if c % 4:
                raise ConfigError(f"stage channel {c} not divisible by 4 channel groups")
        if self.gnconv_order < 1:
            raise ConfigError("gnconv_order must be >= 1")
        if self.stage_channels[3] % (2 ** (self.gnconv_order - 1)):
            raise ConfigError(
                f"deepest stage width {self.stage_channels[3]} not divisible by "
                f"2^{self.gnconv_order - 1} (gnconv split plan)")
        if self.gnconv_kernel % 2 == 0 or self.gnconv_kernel < 1:
            raise ConfigError("gnconv_kernel must be odd and positive")
        if self.reduce_passes < 1:
            raise ConfigError("reduce_passes must be >= 1")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        return self

    def validate_spatial(self, h, w):
        """Reject input sizes whose stage grids the window cannot tile."""
        if h % 32 or w % 32:
            raise ConfigError(f"input dims ({h},{w}) must be divisible by 32")
        for i in range(4):
            gh, gw = h // (4 * 2 ** i), w // (4 * 2 ** i)
            m = min(self.window, gh, gw)
            if gh % m or gw % m:
                raise ConfigError(
                    f"stage {i + 1} grid ({gh},{gw}) not divisible by window {m} "
                    f"(input ({h},{w}), window {self.window})")

    def to_dict(self):
        d = {}
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            d[name] = tuple(v) if isinstance(v, (list, tuple)) else v
        return d

    @classmethod
    def from_dict(cls, d):
        kwargs = {}
        for name, f in cls.__dataclass_fields__.items():
            if name not in d:
                continue
            v = d[name]
            kwargs[name] = tuple(v) if isinstance(f.default, tuple) else v
        return cls(**kwargs)


class TwoPathNet(Module):
    """Image [N, 3, H, W] -> vessel probabilities [N, 1, H, W]."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.swin = SwinEncoder(cfg, rng, dtype)
        self.res = ResEncoder(cfg, rng, dtype)
        self.fusion = EncoderFusion(cfg, rng, dtype)
        self.skips = SkipReducer(cfg.stage_channels, rng, cfg.reduce_passes, dtype)
        self.decoder = Decoder(cfg.stage_channels, rng, dtype)

    def forward_parts(self, img):
        """Forward pass exposing every intermediate pyramid (for tests and
        demos)."""
        n, c, h, w = img.shape
        self.cfg.validate_spatial(h, w)
        swin_maps = self.swin(img)
        res_maps = self.res(img)
        fused = self.fusion(swin_maps, res_maps)
        skips = self.skips(fused)
        probs = self.decoder(skips)
        return {"swin": swin_maps, "res": res_maps, "fused": fused,
                "skips": skips, "probs": probs}

    def forward(self, img):
        return self.forward_parts(img)["probs"]


def build_model(cfg: ModelConfig, seed=42, dtype=np.float32):
    """Deterministic model construction: same seed, same parameters."""
    rng = np.random.default_rng(seed)
    return TwoPathNet(cfg, rng, dtype)
