"""Low-light enhancement pipeline: exposure fusion, local contrast, white balance, saturation.

Images are float64 arrays of shape (H, W, 3) with values in [0, 1]. Each
stage is a pure function ``stage(img, cfg) -> img`` that preserves shape and
range.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

LUMA = np.array([0.2126, 0.7152, 0.0722])
EPS = 1e-6


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnhanceConfig:
    exposure_gammas: tuple[float, ...] = (0.5, 1.0, 2.0)
    wellexposedness_sigma: float = 0.25
    surround_radius: float | None = None  # None -> min(w, h) / 8
    contrast_gain: float = 0.8
    wb_grayworld_power: float = 0.7
    wb_whitepoint_power: float = 0.3
    saturation_gain: float = 0.3
    fusion: bool = True
    tonemap: bool = True
    white_balance: bool = True
    saturation: bool = True

    def validate(self) -> None:
        if len(self.exposure_gammas) == 0:
            raise ConfigError("exposure_gammas must be non-empty")
        if any(g <= 0 or not np.isfinite(g) for g in self.exposure_gammas):
            raise ConfigError(f"exposure_gammas must be positive and finite: {self.exposure_gammas}")
        if self.wellexposedness_sigma <= 0:
            raise ConfigError("wellexposedness_sigma must be positive")
        if self.surround_radius is not None and not (self.surround_radius > 0 and np.isfinite(self.surround_radius)):
            raise ConfigError("surround_radius must be positive and finite")
        for name in ("contrast_gain", "saturation_gain"):
            v = getattr(self, name)
            if v < 0 or not np.isfinite(v):
                raise ConfigError(f"{name} must be non-negative and finite")
        for name in ("wb_grayworld_power", "wb_whitepoint_power"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "EnhanceConfig":
        return cls(exposure_gammas=(1.0,), contrast_gain=0.0, wb_grayworld_power=0.0,
                   wb_whitepoint_power=0.0, saturation_gain=0.0)


def luminance(img: np.ndarray) -> np.ndarray:
    return img @ LUMA


def _check(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    return img


def exposure_weights(img: np.ndarray, cfg: EnhanceConfig) -> tuple[np.ndarray, np.ndarray]:
    """Virtual exposures ``img ** gamma`` (K, H, W, 3) and their per-pixel weights (K, H, W) summing to 1."""
    cfg.validate()
    img = _check(img)
    exposures = np.stack([np.power(img, g) for g in cfg.exposure_gammas])
    lum = exposures @ LUMA
    logw = -((lum - 0.5) ** 2) / (2.0 * cfg.wellexposedness_sigma**2)
    # normalise in log space so tiny sigmas cannot underflow every weight
    w = np.exp(logw - logw.max(axis=0, keepdims=True))
    return exposures, w / w.sum(axis=0, keepdims=True)


def exposure_fuse(img: np.ndarray, cfg: EnhanceConfig) -> np.ndarray:
    exposures, w = exposure_weights(img, cfg)
    return np.clip((w[..., None] * exposures).sum(axis=0), 0.0, 1.0)


def _rescale_luminance(img: np.ndarray, lum: np.ndarray, new_lum: np.ndarray) -> np.ndarray:
    ratio = np.where(lum > EPS, new_lum / np.maximum(lum, EPS), 1.0)
    # near-black pixels: shift instead of scale so chroma stays defined
    shift = np.where(lum > EPS, 0.0, new_lum - lum)
    return np.clip(img * ratio[..., None] + shift[..., None], 0.0, 1.0)


def tone_map_local_contrast(img: np.ndarray, cfg: EnhanceConfig) -> np.ndarray:
    """Boost luminance detail around a Gaussian surround, keeping chroma ratios."""
    cfg.validate()
    img = _check(img)
    h, w = img.shape[:2]
    radius = cfg.surround_radius if cfg.surround_radius is not None else min(h, w) / 8.0
    lum = luminance(img)
    surround = gaussian_filter(lum, sigma=radius, mode="mirror", truncate=3.0)
    new_lum = np.clip(lum + cfg.contrast_gain * (lum - surround), 0.0, 1.0)
    return _rescale_luminance(img, lum, new_lum)


def white_balance_gains(img: np.ndarray, cfg: EnhanceConfig) -> np.ndarray:
    img = _check(img)
    means = img.mean(axis=(0, 1))
    maxes = img.max(axis=(0, 1))
    ok = (means > 0) & (maxes > 0)
    gains = np.ones(3)
    if not ok.any():
        return gains
    mu_ref = means[ok].mean()
    max_ref = maxes[ok].mean()
    gains[ok] = (mu_ref / means[ok]) ** cfg.wb_grayworld_power * (max_ref / maxes[ok]) ** cfg.wb_whitepoint_power
    return gains


def white_balance(img: np.ndarray, cfg: EnhanceConfig) -> np.ndarray:
    cfg.validate()
    return np.clip(_check(img) * white_balance_gains(img, cfg), 0.0, 1.0)


def saturate_adaptive(img: np.ndarray, cfg: EnhanceConfig) -> np.ndarray:
    """Scale chroma about luminance, more strongly for dull pixels."""
    cfg.validate()
    img = _check(img)
    lum = luminance(img)[..., None]
    s = img.max(axis=-1, keepdims=True) - img.min(axis=-1, keepdims=True)
    factor = 1.0 + cfg.saturation_gain * (1.0 - s)
    return np.clip(lum + factor * (img - lum), 0.0, 1.0)


def enhance(img: np.ndarray, cfg: EnhanceConfig | None = None) -> np.ndarray:
    cfg = cfg or EnhanceConfig()
    cfg.validate()
    out = _check(img)
    if cfg.fusion:
        out = exposure_fuse(out, cfg)
    if cfg.tonemap:
        out = tone_map_local_contrast(out, cfg)
    if cfg.white_balance:
        out = white_balance(out, cfg)
    if cfg.saturation:
        out = saturate_adaptive(out, cfg)
    return out


def with_stages(cfg: EnhanceConfig, *, fusion=True, tonemap=True, wb=True, sat=True) -> EnhanceConfig:
    return replace(cfg, fusion=fusion, tonemap=tonemap, white_balance=wb, saturation=sat)


# ---------------------------------------------------------------- PNG io


def load_image(path: str | Path, size: int | None = None) -> np.ndarray:
    im = Image.open(path).convert("RGB")
    if size is not None and im.size != (size, size):
        im = im.resize((size, size), Image.BILINEAR)
    return np.asarray(im, dtype=np.float64) / 255.0


def save_image(img: np.ndarray, path: str | Path) -> None:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)
