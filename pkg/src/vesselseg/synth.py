"""Synthetic fundus-style data: branching vessel trees drawn as
anti-aliased polylines of decreasing width over a textured disc, with the
mask rasterized exactly as the dilation of the centerline pixels.

Pure function of (seed, count, size); images regenerated from the same seed
are bit-identical.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

DISC_RADIUS_FRAC = 0.46
VESSEL_FRACTION = (0.02, 0.20)  # of disc pixels, enforced by resampling

_BASE_COLOR = np.array([0.76, 0.38, 0.16])
_VESSEL_COLOR = np.array([0.38, 0.07, 0.05])


def _disc_mask(size):
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    r = DISC_RADIUS_FRAC * size
    return (yy - c) ** 2 + (xx - c) ** 2 <= r * r


def _texture(rng, size):
    coarse = rng.normal(0.0, 1.0, size=(8, 8))
    tex = ndimage.zoom(coarse, size / 8.0, order=3)[:size, :size]
    tex = tex / (np.abs(tex).max() + 1e-9)
    return 0.05 * tex


def _branch_points(rng, start, heading, length, size):
    """Sample a wandering polyline at sub-pixel resolution."""
    pts = [np.asarray(start, dtype=np.float64)]
    h = float(heading)
    step = 1.0
    for _ in range(int(length / step)):
        h += rng.normal(0.0, 0.18)
        nxt = pts[-1] + step * np.array([np.sin(h), np.cos(h)])
        if not (0 <= nxt[0] < size and 0 <= nxt[1] < size):
            break
        pts.append(nxt)
    return np.array(pts), h


def _grow_tree(rng, size):
    """Branch segments as (points, width); widths shrink from macro (3-5 px)
    to micro (1 px) with depth."""
    c = size / 2.0
    root_angle = rng.uniform(0, 2 * np.pi)
    root = np.array([c + 0.18 * size * np.sin(root_angle),
                     c + 0.18 * size * np.cos(root_angle)])
    segments = []
    n_main = int(rng.integers(3, 6))
    queue = []
    for _ in range(n_main):
        heading = rng.uniform(0, 2 * np.pi)
        width = float(rng.uniform(3.0, 5.0))
        queue.append((root.copy(), heading, width, 0))
    while queue:
        start, heading, width, depth = queue.pop(0)
        length = rng.uniform(0.25, 0.55) * size / (depth + 1) + 4
        pts, end_heading = _branch_points(rng, start, heading, length, size)
        if len(pts) < 2:
            continue
        segments.append((pts, max(width, 1.0)))
        if depth < 3:
            n_child = int(rng.integers(1, 3))
            for _ in range(n_child):
                split_at = int(rng.integers(len(pts) // 2, len(pts)))
                child_heading = end_heading + rng.uniform(0.3, 0.9) * rng.choice([-1.0, 1.0])
                child_width = max(width * rng.uniform(0.45, 0.7), 1.0)
                queue.append((pts[split_at].copy(), child_heading, child_width, depth + 1))
    return segments


def _rasterize(segments, size, disc):
    """Vessel alpha (anti-aliased, for the image) and the exact mask
    (centerline pixels dilated by each segment's radius)."""
    alpha = np.zeros((size, size))
    mask = np.zeros((size, size), dtype=bool)
    offsets = {}
    for pts, width in segments:
        r = width / 2.0
        rad = int(np.ceil(r)) + 1
        if rad not in offsets:
            oy, ox = np.mgrid[-rad:rad + 1, -rad:rad + 1]
            offsets[rad] = (oy, ox, np.hypot(oy, ox))
        oy, ox, dist = offsets[rad]
        # densify so consecutive samples are < 0.5 px apart
        dense = []
        for a, b in zip(pts[:-1], pts[1:]):
            n = max(int(np.ceil(np.hypot(*(b - a)) / 0.5)), 1)
            t = np.linspace(0.0, 1.0, n, endpoint=False)
            dense.append(a + t[:, None] * (b - a))
        dense.append(pts[-1:])
        centers = np.unique(np.round(np.concatenate(dense)).astype(np.int64), axis=0)
        for cy, cx in centers:
            if not (0 <= cy < size and 0 <= cx < size):
                continue
            ys, xs = cy + oy, cx + ox
            ok = (ys >= 0) & (ys < size) & (xs >= 0) & (xs < size)
            yy, xx, dd = ys[ok], xs[ok], dist[ok]
            np.maximum.at(alpha, (yy, xx), np.clip(r + 0.5 - dd, 0.0, 1.0))
            mask[yy[dd <= r], xx[dd <= r]] = True
    mask &= disc
    alpha *= disc
    return alpha, mask


def generate_sample(rng, size):
    """One (image uint8 [H,W,3], mask uint8 {0,255}) pair inside the
    vessel-fraction envelope; out-of-range draws are rejected and redrawn."""
    disc = _disc_mask(size)
    disc_px = int(disc.sum())
    for _ in range(64):
        segments = _grow_tree(rng, size)
        alpha, mask = _rasterize(segments, size, disc)
        frac = mask.sum() / disc_px
        if VESSEL_FRACTION[0] <= frac <= VESSEL_FRACTION[1]:
            break
    else:
        raise RuntimeError("synthetic generator failed to hit the vessel-fraction envelope")
    tex = _texture(rng, size)
    img = np.zeros((size, size, 3))
    base = _BASE_COLOR[None, None, :] * (1.0 + tex[:, :, None])
    img += np.where(disc[:, :, None], base, 0.02)
    img = img * (1.0 - alpha[:, :, None]) + _VESSEL_COLOR[None, None, :] * alpha[:, :, None]
    img = np.clip(img, 0.0, 1.0)
    return (np.round(img * 255).astype(np.uint8),
            np.where(mask, 255, 0).astype(np.uint8))


def synth_generate(seed, count, size, out_dir):
    """Write `count` image/mask PNG pairs under out_dir/{images,masks}."""
    if size % 32:
        raise ValueError(f"synth size {size} must be divisible by 32")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(count):
        img, mask = generate_sample(rng, size)
        name = f"synth_{i:03d}.png"
        Image.fromarray(img).save(out / "images" / name)
        Image.fromarray(mask).save(out / "masks" / name)
    return out


def synth_arrays(seed, count, size):
    """In-memory variant: list of ([3,H,W] float image, [H,W] float mask)."""
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        img, mask = generate_sample(rng, size)
        samples.append((np.ascontiguousarray(img.transpose(2, 0, 1).astype(np.float32) / 255.0),
                        (mask > 127).astype(np.float32)))
    return samples
