"""Tiny ViT shared by the global and region pathways, and the learnable pathway fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Mlp, Module, MultiHeadAttention, make_rng, param
from .regions import RegionMaskSet, apply_masks
from .tensor import Tensor


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 32
    patch_size: int = 8
    depth: int = 2
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1


LARGE_VIT = VitConfig(image_size=224, patch_size=14, depth=24, dim=1024, heads=16)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, num_patches, patch*patch*3), patches in raster order."""
    b, h, w, c = images.shape
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


class VitBlock(Module):
    def __init__(self, rng, cfg: VitConfig, trainable: bool):
        self.norm1 = LayerNorm(cfg.dim, trainable)
        self.attn = MultiHeadAttention(rng, cfg.dim, cfg.heads, trainable)
        self.norm2 = LayerNorm(cfg.dim, trainable)
        self.mlp = Mlp(rng, cfg.dim, int(cfg.dim * cfg.mlp_ratio), trainable)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attn(self.norm1(x)))
        return T.add(x, self.mlp(self.norm2(x)))


class VisionEncoder(Module):
    """Frozen by default: the pretrained-backbone stand-in never receives updates."""

    def __init__(self, cfg: VitConfig, seed: int = 0, trainable: bool = False):
        rng = make_rng(seed)
        self._cfg = cfg
        self.patch_embed = Linear(rng, cfg.patch_size**2 * 3, cfg.dim, trainable=trainable)
        self.cls = param(rng.normal(0.0, 0.02, cfg.dim), trainable)
        self.pos = param(rng.normal(0.0, 0.02, (cfg.num_tokens, cfg.dim)), trainable)
        self.blocks = [VitBlock(rng, cfg, trainable) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim, trainable)

    @property
    def cfg(self) -> VitConfig:
        return self._cfg

    def __call__(self, images: np.ndarray | Tensor) -> Tensor:
        """(B, H, W, 3) images -> (B, num_tokens, dim) tokens."""
        data = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        if data.ndim == 3:
            data = data[None]
        s = self.cfg.image_size
        if data.shape[1:] != (s, s, 3):
            raise ValueError(f"encoder expects {s}x{s}x3 images, got {data.shape[1:]}")
        b = data.shape[0]
        if isinstance(images, Tensor) and images.requires_grad:
            # differentiable patchify for gradient checks through the input
            p, n = self.cfg.patch_size, s // self.cfg.patch_size
            x = T.reshape(images, (b, n, p, n, p, 3))
            x = T.reshape(T.permute(x, (0, 1, 3, 2, 4, 5)), (b, n * n, p * p * 3))
        else:
            x = Tensor(patchify(data, self.cfg.patch_size))
        x = self.patch_embed(x)
        cls = T.expand(T.reshape(self.cls, (1, self.cfg.dim)), (b, 1, self.cfg.dim))
        x = T.add(T.concat([cls, x], axis=1), T.expand(self.pos, (b,) + self.pos.shape))
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


def encode(img: np.ndarray, encoder: VisionEncoder) -> Tensor:
    """Single (H, W, 3) image -> (num_tokens, dim)."""
    return encoder(np.asarray(img)[None])[0]


def pool_regions(encodings: Tensor, how: Literal["mean", "max"] = "mean") -> Tensor:
    """(R, T, D) per-region token grids -> (T, D)."""
    if how == "mean":
        return T.mean(encodings, axis=0)
    if how == "max":
        return T.max(encodings, axis=0)
    raise ValueError(f"unknown pooling {how!r}")


def dual_encode(enh: np.ndarray, masks: RegionMaskSet, encoder: VisionEncoder,
                pooling: Literal["mean", "max"] = "mean") -> tuple[Tensor, Tensor]:
    """Global tokens E_G and pooled region tokens E_S from the same encoder weights.

    With no masks the region pathway is all zeros.
    """
    enh = np.asarray(enh, dtype=np.float64)
    views = [enh] + apply_masks(enh, masks)
    enc = encoder(np.stack(views))
    e_g = enc[0]
    if len(masks) == 0:
        return e_g, Tensor(np.zeros(e_g.shape))
    return e_g, pool_regions(enc[1:], pooling)


class Fusion(Module):
    """Tokenwise ``E_F = W_f [E_G ; E_S]`` (feature-axis concatenation, no bias)."""

    def __init__(self, rng, dim: int, out_dim: int, trainable: bool = True):
        std = 1.0 / np.sqrt(2 * dim)
        self.weight = param(rng.normal(0.0, std, (out_dim, 2 * dim)), trainable)

    def __call__(self, e_g: Tensor, e_s: Tensor) -> Tensor:
        return fuse(e_g, e_s, self.weight)


def fuse(e_g: Tensor, e_s: Tensor, w_f: Tensor) -> Tensor:
    if e_g.shape != e_s.shape:
        raise T.ShapeError(f"pathway shapes differ: {e_g.shape} vs {e_s.shape}")
    return T.linear(T.concat([e_g, e_s], axis=-1), w_f)
