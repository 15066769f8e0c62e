"""Region-of-interest masks: ingestion of precomputed mask files and a fallback proposer."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image
from scipy import ndimage

from .enhance import luminance


class MaskError(ValueError):
    pass


@dataclass
class RegionMaskSet:
    masks: list[np.ndarray] = field(default_factory=list)  # bool (H, W)
    source: Literal["ingested", "fallback", "none"] = "ingested"

    def __post_init__(self):
        for i, m in enumerate(self.masks):
            if not np.any(m):
                raise MaskError(f"mask {i} has no foreground pixels")

    def __len__(self) -> int:
        return len(self.masks)

    def resized(self, size: int) -> "RegionMaskSet":
        out = []
        for m in self.masks:
            if m.shape != (size, size):
                im = Image.fromarray(m.astype(np.uint8) * 255).resize((size, size), Image.NEAREST)
                m = np.asarray(im) > 127
            if m.any():
                out.append(m)
        return RegionMaskSet(out, self.source)


def _mask_index(path: Path, image_id: str) -> str:
    return path.name[len(image_id) + len("_mask_"):-len(".png")]


def load_masks(mask_dir: str | Path, image_id: str, image_shape: tuple[int, int] | None = None) -> RegionMaskSet:
    """Load ``<image_id>_mask_*.png`` in lexicographic filename order; pixel > 0.5 is foreground."""
    mask_dir = Path(mask_dir)
    if not mask_dir.is_dir():
        raise FileNotFoundError(f"mask directory {mask_dir} does not exist")
    pattern = re.compile(re.escape(image_id) + r"_mask_[^/]*\.png$")
    files = sorted(p for p in mask_dir.iterdir() if pattern.fullmatch(p.name))
    masks = []
    for p in files:
        arr = np.asarray(Image.open(p).convert("L"), dtype=np.float64) / 255.0
        if image_shape is not None and arr.shape != tuple(image_shape):
            raise MaskError(f"{p.name}: mask size {arr.shape[::-1]} does not match image size {tuple(image_shape)[::-1]}")
        m = arr > 0.5
        if not m.any():
            raise MaskError(f"{p.name}: mask has no foreground pixels")
        masks.append(m)
    return RegionMaskSet(masks, "ingested")


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(path)


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float | None:
    """Otsu threshold over [0, 1] values, or None when the input has a single level."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.max() - values.min() <= 1e-12:
        return None
    hist, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    centers = (edges[:-1] + edges[1:]) / 2
    p = hist / hist.sum()
    w0 = np.cumsum(p)
    m0 = np.cumsum(p * centers)
    mt = m0[-1]
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mt * w0 - m0) ** 2 / (w0 * w1)
    between[~np.isfinite(between)] = -1.0
    k = int(np.argmax(between))
    return float(edges[k + 1])


def propose_fallback(img: np.ndarray, k: int) -> RegionMaskSet:
    """Otsu foreground -> 4-connected components -> the ``k`` largest (ties: earlier raster start)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    lum = luminance(np.asarray(img, dtype=np.float64))
    t = otsu_threshold(lum)
    if t is None:
        return RegionMaskSet([], "fallback")
    fg = lum > t
    labels, n = ndimage.label(fg)  # default structure is 4-connectivity in 2-D
    if n == 0:
        return RegionMaskSet([], "fallback")
    flat = labels.ravel()
    areas = np.bincount(flat, minlength=n + 1)[1:]
    first = np.full(n + 1, flat.size)
    nz = np.nonzero(flat)[0]
    np.minimum.at(first, flat[nz], nz)
    order = sorted(range(1, n + 1), key=lambda lab: (-areas[lab - 1], first[lab]))
    return RegionMaskSet([labels == lab for lab in order[:k]], "fallback")


def apply_masks(img: np.ndarray, masks: RegionMaskSet) -> list[np.ndarray]:
    """One copy of ``img`` per mask with background pixels set to zero."""
    img = np.asarray(img, dtype=np.float64)
    out = []
    for i, m in enumerate(masks.masks):
        if m.shape != img.shape[:2]:
            raise MaskError(f"mask {i} has shape {m.shape}, image has {img.shape[:2]}")
        out.append(img * m[..., None])
    return out
