"""Patchification, patch masks and fixed 2-D sin-cos position tables.

Token layout follows the masked-autoencoder convention: tokens are raster
ordered over the patch grid and each token flattens its patch as (p, q, c).
"""
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
import torch
from einops import rearrange, repeat

from src.error_handler import DimensionMismatchError, GridMismatchError, InvalidRatioError

logger = logging.getLogger(__name__)


@dataclass
class PatchGrid:
    """Patch tokens [B, N, ps*ps*C] together with the grid they came from"""
    tokens: torch.Tensor
    grid_h: int
    grid_w: int
    channels: int

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w


@dataclass
class MaskSpec:
    """Per-image patch mask. mask_bitmap is 1 for visible patches, 0 for masked ones"""
    keep_indices: torch.Tensor
    mask_bitmap: torch.Tensor
    ratio: float

    @property
    def batch_size(self) -> int:
        return self.mask_bitmap.shape[0]

    @property
    def num_patches(self) -> int:
        return self.mask_bitmap.shape[1]

    @property
    def num_visible(self) -> int:
        return self.keep_indices.shape[1]

    @property
    def effective_ratio(self) -> float:
        return 1.0 - self.num_visible / self.num_patches

    def complement(self) -> "MaskSpec":
        """Swap visible and masked patches"""
        return mask_from_bitmap(1 - self.mask_bitmap, ratio=self.num_visible / self.num_patches)

    def to(self, device: torch.device) -> "MaskSpec":
        return MaskSpec(self.keep_indices.to(device), self.mask_bitmap.to(device), self.ratio)


def num_masked(num_patches: int, ratio: float) -> int:
    """Masked patch count: floor(r * N)"""
    return int(math.floor(ratio * num_patches))


def _check_divisible(h: int, w: int, ps: int) -> None:
    if ps <= 0 or h % ps or w % ps:
        raise DimensionMismatchError(f"Patch size {ps} does not divide image size {h}x{w}")


def patchify(x: torch.Tensor, ps: int) -> PatchGrid:
    """[B, C, H, W] -> PatchGrid with tokens [B, (H/ps)(W/ps), ps*ps*C]"""
    if x.dim() != 4:
        raise DimensionMismatchError(f"Expected a [B, C, H, W] batch, got shape {tuple(x.shape)}")
    _, c, h, w = x.shape
    _check_divisible(h, w, ps)
    tokens = rearrange(x, "b c (gh p) (gw q) -> b (gh gw) (p q c)", p=ps, q=ps)
    return PatchGrid(tokens=tokens, grid_h=h // ps, grid_w=w // ps, channels=c)


def unpatchify(grid: PatchGrid, ps: int) -> torch.Tensor:
    """Exact inverse of patchify"""
    tokens = grid.tokens
    if tokens.dim() != 3:
        raise DimensionMismatchError(f"Expected tokens [B, N, D], got shape {tuple(tokens.shape)}")
    if tokens.shape[-1] != ps * ps * grid.channels:
        raise DimensionMismatchError(
            f"Token dim {tokens.shape[-1]} != ps*ps*C = {ps * ps * grid.channels}"
        )
    if tokens.shape[1] != grid.num_patches:
        raise DimensionMismatchError(
            f"{tokens.shape[1]} tokens do not fill a {grid.grid_h}x{grid.grid_w} grid"
        )
    return rearrange(tokens, "b (gh gw) (p q c) -> b c (gh p) (gw q)",
                     gh=grid.grid_h, gw=grid.grid_w, p=ps, q=ps, c=grid.channels)


def sample_mask(batch_size: int, num_patches: int, ratio: float, seed: int,
                device: Optional[torch.device] = None) -> MaskSpec:
    """Mask exactly floor(r*N) patches per image, uniformly without replacement"""
    if not (0.0 <= ratio < 1.0):
        raise InvalidRatioError(f"Masking ratio must lie in [0, 1), got {ratio}")
    n_keep = num_patches - num_masked(num_patches, ratio)

    generator = torch.Generator().manual_seed(int(seed))
    noise = torch.rand(batch_size, num_patches, generator=generator)
    ids_shuffle = torch.argsort(noise, dim=1)
    keep_indices, _ = torch.sort(ids_shuffle[:, :n_keep], dim=1)

    bitmap = torch.zeros(batch_size, num_patches, dtype=torch.long)
    bitmap.scatter_(1, keep_indices, 1)

    spec = MaskSpec(keep_indices=keep_indices, mask_bitmap=bitmap, ratio=ratio)
    return spec.to(device) if device is not None else spec


def full_mask(batch_size: int, num_patches: int,
              device: Optional[torch.device] = None) -> MaskSpec:
    """The r = 0 mask: every patch visible"""
    keep = torch.arange(num_patches, device=device).unsqueeze(0).expand(batch_size, -1).contiguous()
    bitmap = torch.ones(batch_size, num_patches, dtype=torch.long, device=device)
    return MaskSpec(keep_indices=keep, mask_bitmap=bitmap, ratio=0.0)


def mask_from_bitmap(bitmap: torch.Tensor, ratio: Optional[float] = None) -> MaskSpec:
    """Build a MaskSpec from a [B, N] 0/1 bitmap with equal visible counts per image"""
    bitmap = bitmap.long()
    counts = bitmap.sum(dim=1)
    if counts.numel() and not torch.all(counts == counts[0]):
        raise GridMismatchError("Every image must have the same number of visible patches")
    n_keep = int(counts[0]) if counts.numel() else 0
    # stable sort puts visible indices (1) first, in increasing order
    order = torch.argsort(-bitmap, dim=1, stable=True)
    keep_indices = order[:, :n_keep]
    n = bitmap.shape[1]
    if ratio is None:
        ratio = 1.0 - n_keep / n
    return MaskSpec(keep_indices=keep_indices, mask_bitmap=bitmap, ratio=ratio)


def pixel_mask(mask: MaskSpec, grid_h: int, grid_w: int, ps: int, channels: int,
               dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Broadcast the patch bitmap to a [B, C, H, W] pixel mask M"""
    if mask.num_patches != grid_h * grid_w:
        raise GridMismatchError(
            f"Mask has {mask.num_patches} patches but the grid is {grid_h}x{grid_w}"
        )
    return repeat(mask.mask_bitmap.to(dtype), "b (gh gw) -> b c (gh p) (gw q)",
                  gh=grid_h, gw=grid_w, p=ps, q=ps, c=channels)


def apply_mask(x: torch.Tensor, mask: MaskSpec, ps: int) -> torch.Tensor:
    """M (.) x: masked patches zeroed, visible patches bit-identical"""
    _, c, h, w = x.shape
    _check_divisible(h, w, ps)
    if mask.batch_size != x.shape[0]:
        raise GridMismatchError(f"Mask batch {mask.batch_size} != image batch {x.shape[0]}")
    visible = pixel_mask(mask, h // ps, w // ps, ps, c, dtype=torch.bool)
    return torch.where(visible, x, torch.zeros((), dtype=x.dtype, device=x.device))


def gather_tokens(tokens: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    """Select tokens [B, N, D] at per-image indices [B, K] -> [B, K, D]"""
    return torch.gather(tokens, 1, indices.unsqueeze(-1).expand(-1, -1, tokens.shape[-1]))


def _sincos_1d(embed_dim: int, pos: np.ndarray) -> np.ndarray:
    omega = np.arange(embed_dim // 2, dtype=np.float64)
    omega /= embed_dim / 2.
    omega = 1. / 10000 ** omega
    out = np.einsum('m,d->md', pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


@lru_cache(maxsize=32)
def _sincos_2d(embed_dim: int, grid_h: int, grid_w: int) -> np.ndarray:
    if embed_dim % 4:
        raise DimensionMismatchError(f"Sin-cos table width {embed_dim} must be divisible by 4")
    gw, gh = np.meshgrid(np.arange(grid_w, dtype=np.float64), np.arange(grid_h, dtype=np.float64))
    # half the width encodes the row, half the column
    emb_h = _sincos_1d(embed_dim // 2, gh)
    emb_w = _sincos_1d(embed_dim // 2, gw)
    table = np.concatenate([emb_h, emb_w], axis=1)
    table.setflags(write=False)
    return table


def sincos_pos_embed(embed_dim: int, grid_hw: Tuple[int, int],
                     dtype: torch.dtype = torch.float32,
                     device: Optional[torch.device] = None) -> torch.Tensor:
    """Fixed [N, D] 2-D sinusoidal position table for a grid_h x grid_w patch grid"""
    table = _sincos_2d(embed_dim, int(grid_hw[0]), int(grid_hw[1]))
    return torch.tensor(table, dtype=dtype, device=device)
