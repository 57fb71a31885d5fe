"""Dataset ingestion for paired image/mask layouts (DRIVE/CHASE/STARE
style) plus the reflection padding that aligns dims to multiples of 32.

Only PNG and PPM/PGM are decoded; other codecs must be converted first.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SUPPORTED_SUFFIXES = {".png", ".ppm", ".pgm"}


class DataError(ValueError):
    """File missing, undecodable, or inconsistent with its pair."""


@dataclass
class PadRecord:
    """Reflection padding applied at load time: (top, bottom, left, right)."""

    top: int
    bottom: int
    left: int
    right: int

    @property
    def any(self):
        return bool(self.top or self.bottom or self.left or self.right)


@dataclass
class SampleRef:
    image: Path
    mask: Path
    fov: Path = None


@dataclass
class DatasetManifest:
    samples: list
    split: str = "train"
    source: str = ""

    def __len__(self):
        return len(self.samples)


def _open(path):
    path = Path(path)
    if path.suffix.lower() not in SUPPORTED_SUFFIXES:
        raise DataError(f"{path}: unsupported codec {path.suffix!r} "
                        f"(supported: {sorted(SUPPORTED_SUFFIXES)})")
    try:
        return Image.open(path)
    except Exception as e:
        raise DataError(f"{path}: cannot decode ({e})") from None


def load_image(path):
    """RGB image as float32 [3, H, W] scaled to [0, 1]."""
    img = _open(path).convert("RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_binary_map(path):
    """Mask/FOV as float32 [H, W] in {0, 1}; stored value > 127 is foreground."""
    img = _open(path).convert("L")
    return (np.asarray(img) > 127).astype(np.float32)


def pad_to_multiple(arr, multiple=32):
    """Reflect-pad the trailing two dims up to the next multiple.

    Pads are split evenly per side (extra pixel goes to the bottom/right).
    """
    h, w = arr.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    rec = PadRecord(top=ph // 2, bottom=ph - ph // 2, left=pw // 2, right=pw - pw // 2)
    if not rec.any:
        return arr, rec
    pad = [(0, 0)] * (arr.ndim - 2) + [(rec.top, rec.bottom), (rec.left, rec.right)]
    return np.pad(arr, pad, mode="reflect"), rec


def unpad(arr, rec: PadRecord):
    """Exact inverse of pad_to_multiple on the trailing two dims."""
    h, w = arr.shape[-2:]
    return arr[..., rec.top:h - rec.bottom or None, rec.left:w - rec.right or None]


def load_sample(ref: SampleRef):
    """Load and pad one (image, mask, fov?) triple.

    Returns (image [3,H',W'], mask [H',W'], fov [H',W'] or None, PadRecord);
    the record inverts the padding on predictions.
    """
    image = load_image(ref.image)
    mask = load_binary_map(ref.mask)
    if image.shape[1:] != mask.shape:
        raise DataError(f"image/mask dims disagree: {ref.image} is {image.shape[1:]}, "
                        f"{ref.mask} is {mask.shape}")
    fov = None
    if ref.fov is not None:
        fov = load_binary_map(ref.fov)
        if fov.shape != mask.shape:
            raise DataError(f"fov dims disagree: {ref.fov} is {fov.shape}, "
                            f"expected {mask.shape}")
    image, rec = pad_to_multiple(image)
    mask, _ = pad_to_multiple(mask)
    if fov is not None:
        fov, _ = pad_to_multiple(fov)
        fov = fov.copy()
        # padding reflects real pixels; keep evaluation inside the source frame
        if rec.any:
            keep = np.zeros_like(fov)
            keep[rec.top:fov.shape[0] - rec.bottom or None,
                 rec.left:fov.shape[1] - rec.right or None] = 1.0
            fov = fov * keep
    return image, mask, fov, rec


def scan_dataset(root, split="train", layout="paired-dirs"):
    """Match images/<stem>.* with masks/<stem>.* (and optional fov/<stem>.*)
    case-sensitively; unmatched stems are warned about. Ordering is sorted,
    so re-scans are identical."""
    if layout != "paired-dirs":
        raise DataError(f"unknown layout {layout!r}")
    root = Path(root)
    img_dir, mask_dir, fov_dir = root / "images", root / "masks", root / "fov"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"{root}: expected images/ and masks/ subdirectories")

    def stems(d):
        return {p.stem: p for p in sorted(d.iterdir())
                if p.suffix.lower() in SUPPORTED_SUFFIXES}

    images = stems(img_dir)
    masks = stems(mask_dir)
    fovs = stems(fov_dir) if fov_dir.is_dir() else {}
    matched = sorted(set(images) & set(masks))
    for orphan in sorted(set(images) ^ set(masks)):
        side = "mask" if orphan in masks else "image"
        warnings.warn(f"unpaired {side} stem {orphan!r} skipped")
    if not matched:
        raise DataError(f"{root}: no matching image/mask pairs")
    samples = [SampleRef(images[s], masks[s], fovs.get(s)) for s in matched]
    return DatasetManifest(samples=samples, split=split, source=str(root))


def load_dataset(manifest: DatasetManifest):
    """Materialize a manifest into (image, mask, fov) arrays + pad records."""
    data, recs = [], []
    for ref in manifest.samples:
        image, mask, fov, rec = load_sample(ref)
        data.append((image, mask, fov))
        recs.append(rec)
    return data, recs
