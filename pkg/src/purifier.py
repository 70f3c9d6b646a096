"""Masked-autoencoder purifier P = g o f with low-rank decoder adapters"""
import logging
import math
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from src.config_manager import PurifierConfig
from src.error_handler import (
    GridMismatchError, LoRAAttachError, NonFiniteError, ResolutionUnsupportedError
)
from src.patch_ops import (
    MaskSpec, PatchGrid, full_mask, gather_tokens, patchify, sincos_pos_embed, unpatchify
)

logger = logging.getLogger(__name__)

PATCH_EMBED_STD = .02


class Attention(nn.Module):
    """Multi-head self-attention over a token sequence"""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        qkv = rearrange(self.qkv(x), "b n (k h d) -> k b h n d", k=3, h=self.num_heads)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = rearrange(attn @ v, "b h n d -> b n (h d)")
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block"""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class LoRALinear(nn.Module):
    """Linear map W x + b + (alpha / rank) * B A x.

    Shares the weight and bias Parameters of the wrapped layer, so the base
    tensors keep their state-dict names.
    """

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        if rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {rank}")
        self.in_features = base.in_features
        self.out_features = base.out_features
        self.rank = rank
        self.alpha = alpha
        self.scale = alpha / rank
        self.weight = base.weight
        self.bias = base.bias
        factory = {"dtype": base.weight.dtype, "device": base.weight.device}
        self.lora_A = nn.Parameter(torch.empty(rank, self.in_features, **factory))
        self.lora_B = nn.Parameter(torch.zeros(self.out_features, rank, **factory))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        base = F.linear(x, self.weight, self.bias)
        return base + F.linear(F.linear(x, self.lora_A), self.lora_B) * self.scale

    def extra_repr(self) -> str:
        return f"in={self.in_features}, out={self.out_features}, rank={self.rank}, alpha={self.alpha}"


class PurifierBase(nn.Module):
    """Shared purify/reconstruct plumbing over encode_visible and decode_full"""

    patch_size: int

    def encode_visible(self, x: torch.Tensor, m: MaskSpec) -> torch.Tensor:
        raise NotImplementedError

    def decode_full(self, latents: torch.Tensor, m: MaskSpec,
                    grid_hw: Optional[Tuple[int, int]] = None) -> torch.Tensor:
        raise NotImplementedError

    def _check_resolution(self, x: torch.Tensor) -> Tuple[int, int]:
        h, w = x.shape[-2:]
        if h % self.patch_size or w % self.patch_size:
            raise ResolutionUnsupportedError(
                f"Resolution {h}x{w} is not divisible by patch size {self.patch_size}"
            )
        return h // self.patch_size, w // self.patch_size

    def reconstruct(self, x: torch.Tensor, m: MaskSpec) -> torch.Tensor:
        """g(f(M (.) x)), unclamped; used by every training loss"""
        grid_hw = self._check_resolution(x)
        return self.decode_full(self.encode_visible(x, m), m, grid_hw)

    def encode_full(self, x: torch.Tensor) -> torch.Tensor:
        """Encoder output at r = 0"""
        grid_h, grid_w = self._check_resolution(x)
        return self.encode_visible(x, full_mask(x.shape[0], grid_h * grid_w, device=x.device))

    def forward_full(self, x: torch.Tensor) -> torch.Tensor:
        """Unclamped r = 0 forward"""
        grid_h, grid_w = self._check_resolution(x)
        return self.reconstruct(x, full_mask(x.shape[0], grid_h * grid_w, device=x.device))

    def purify(self, x: torch.Tensor) -> torch.Tensor:
        """Inference-time purification: r = 0 forward clamped to [0, 1]"""
        return self.forward_full(x).clamp(0.0, 1.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.purify(x)


class MaskedAutoencoderPurifier(PurifierBase):
    """Transformer encoder over visible patch tokens, transformer decoder over the full grid.

    Position tables are fixed sin-cos and regenerated for whatever grid the
    input has, so they never enter the state dict.
    """

    def __init__(self, config: PurifierConfig):
        """Initialize the purifier from its architecture config"""
        super().__init__()
        self.config = config
        self.patch_size = config.patch_size
        self.in_chans = config.in_chans
        token_dim = config.token_dim

        self.patch_embed = nn.Linear(token_dim, config.embed_dim)
        self.blocks = nn.ModuleList([
            Block(config.embed_dim, config.num_heads, config.mlp_ratio) for _ in range(config.depth)
        ])
        self.norm = nn.LayerNorm(config.embed_dim)

        self.decoder_embed = nn.Linear(config.embed_dim, config.decoder_embed_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, config.decoder_embed_dim))
        self.decoder_blocks = nn.ModuleList([
            Block(config.decoder_embed_dim, config.decoder_num_heads, config.mlp_ratio)
            for _ in range(config.decoder_depth)
        ])
        self.decoder_norm = nn.LayerNorm(config.decoder_embed_dim)
        self.decoder_pred = nn.Linear(config.decoder_embed_dim, token_dim)

        self.initialize_weights()

    def initialize_weights(self) -> None:
        torch.nn.init.normal_(self.mask_token, std=.02)
        self.apply(self._init_weights)
        # patch embedding: truncated normal at two standard deviations
        torch.nn.init.trunc_normal_(self.patch_embed.weight, std=PATCH_EMBED_STD,
                                    a=-2 * PATCH_EMBED_STD, b=2 * PATCH_EMBED_STD)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            torch.nn.init.xavier_uniform_(module.weight)
            if module.bias is not None:
                nn.init.constant_(module.bias, 0)
        elif isinstance(module, nn.LayerNorm):
            nn.init.constant_(module.bias, 0)
            nn.init.constant_(module.weight, 1.0)

    def _pos(self, dim: int, grid_hw: Tuple[int, int], like: torch.Tensor) -> torch.Tensor:
        return sincos_pos_embed(dim, grid_hw, dtype=like.dtype, device=like.device).unsqueeze(0)

    def encode_visible(self, x: torch.Tensor, m: MaskSpec) -> torch.Tensor:
        """Embed and encode only the visible patches -> [B, N_keep, D_enc]"""
        self._check_resolution(x)
        grid = patchify(x, self.patch_size)
        if m.num_patches != grid.num_patches or m.batch_size != x.shape[0]:
            raise GridMismatchError(
                f"Mask {m.batch_size}x{m.num_patches} does not match "
                f"{x.shape[0]} images of {grid.grid_h}x{grid.grid_w} patches"
            )
        tokens = self.patch_embed(grid.tokens)
        tokens = tokens + self._pos(self.config.embed_dim, (grid.grid_h, grid.grid_w), tokens)
        latents = gather_tokens(tokens, m.keep_indices.to(tokens.device))

        for blk in self.blocks:
            latents = blk(latents)
        latents = self.norm(latents)

        if not torch.isfinite(latents).all():
            raise NonFiniteError("Non-finite encoder activations")
        return latents

    def decode_full(self, latents: torch.Tensor, m: MaskSpec,
                    grid_hw: Optional[Tuple[int, int]] = None) -> torch.Tensor:
        """Scatter latents onto the grid, fill the rest with the mask token, decode every patch"""
        grid_h, grid_w = grid_hw or self.config.grid_hw
        n = grid_h * grid_w
        if m.num_patches != n or latents.shape[1] != m.num_visible:
            raise GridMismatchError(
                f"Latents ({latents.shape[1]} tokens) and mask ({m.num_visible}/{m.num_patches}) "
                f"do not fit a {grid_h}x{grid_w} grid"
            )
        y = self.decoder_embed(latents)
        b, _, d = y.shape
        full = self.mask_token.to(y.dtype).expand(b, n, d)
        index = m.keep_indices.to(y.device).unsqueeze(-1).expand(-1, -1, d)
        full = full.scatter(1, index, y)
        full = full + self._pos(d, (grid_h, grid_w), full)

        for blk in self.decoder_blocks:
            full = blk(full)
        full = self.decoder_norm(full)
        tokens = self.decoder_pred(full)
        return unpatchify(PatchGrid(tokens, grid_h, grid_w, self.in_chans), self.patch_size)


class IdentityPurifier(PurifierBase):
    """P(x) = x on visible patches, zero on masked ones; the no-defense reference"""

    def __init__(self, patch_size: int = 2, in_chans: int = 3):
        super().__init__()
        self.patch_size = patch_size
        self.in_chans = in_chans

    def encode_visible(self, x: torch.Tensor, m: MaskSpec) -> torch.Tensor:
        grid = patchify(x, self.patch_size)
        if m.num_patches != grid.num_patches:
            raise GridMismatchError(f"Mask has {m.num_patches} patches, image has {grid.num_patches}")
        return gather_tokens(grid.tokens, m.keep_indices.to(x.device))

    def decode_full(self, latents: torch.Tensor, m: MaskSpec,
                    grid_hw: Optional[Tuple[int, int]] = None) -> torch.Tensor:
        if grid_hw is None:
            raise GridMismatchError("IdentityPurifier needs an explicit grid")
        grid_h, grid_w = grid_hw
        b, _, d = latents.shape
        full = latents.new_zeros(b, grid_h * grid_w, d)
        index = m.keep_indices.to(latents.device).unsqueeze(-1).expand(-1, -1, d)
        full = full.scatter(1, index, latents)
        return unpatchify(PatchGrid(full, grid_h, grid_w, self.in_chans), self.patch_size)


DECODER_PREFIXES = ("decoder_embed", "mask_token", "decoder_blocks", "decoder_norm", "decoder_pred")


def _lora_targets(model: MaskedAutoencoderPurifier) -> List[Tuple[nn.Module, str]]:
    targets: List[Tuple[nn.Module, str]] = []
    for blk in model.decoder_blocks:
        targets.append((blk.attn, "qkv"))
        targets.append((blk.attn, "proj"))
        targets.append((blk.mlp, "fc1"))
        targets.append((blk.mlp, "fc2"))
    targets.append((model, "decoder_pred"))
    return targets


def has_lora(model: nn.Module) -> bool:
    return any(isinstance(module, LoRALinear) for module in model.modules())


def attach_lora(model: MaskedAutoencoderPurifier, rank: int = 4, alpha: float = 4.0) -> List[str]:
    """Wrap every decoder linear map in a zero-initialised adapter and freeze everything else.

    Returns the dotted names of the adapted layers.
    """
    if has_lora(model):
        raise LoRAAttachError("LoRA adapters are already attached to this purifier")
    if rank < 1:
        raise LoRAAttachError(f"LoRA rank must be >= 1, got {rank}")

    for param in model.parameters():
        param.requires_grad_(False)

    names = {id(module): name for name, module in model.named_modules()}
    adapted = []
    for parent, attr in _lora_targets(model):
        base = getattr(parent, attr)
        setattr(parent, attr, LoRALinear(base, rank, alpha))
        parent_name = names[id(parent)]
        adapted.append(f"{parent_name}.{attr}" if parent_name else attr)

    for name, param in model.named_parameters():
        param.requires_grad_("lora_" in name)

    logger.info(f"Attached rank-{rank} LoRA adapters to {len(adapted)} decoder maps "
                f"({count_trainable(model)} trainable parameters)")
    return adapted


def freeze_encoder(model: MaskedAutoencoderPurifier) -> int:
    """Decoder-only finetuning: freeze f, train every decoder tensor. Returns trainable count"""
    for name, param in model.named_parameters():
        param.requires_grad_(name.startswith(DECODER_PREFIXES))
    trainable = count_trainable(model)
    logger.info(f"Encoder frozen; {trainable} decoder parameters trainable")
    return trainable


def count_trainable(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def lora_parameter_count(model: nn.Module) -> int:
    """Expected adapter size: sum of rank * (in + out) over adapted maps"""
    return sum(m.rank * (m.in_features + m.out_features)
               for m in model.modules() if isinstance(m, LoRALinear))


def named_base_tensors(model: nn.Module) -> Dict[str, torch.Tensor]:
    """Every non-adapter tensor of the state dict"""
    return {k: v for k, v in model.state_dict().items() if "lora_" not in k}


def build_purifier(config: PurifierConfig, dtype: torch.dtype = torch.float32,
                   device: Optional[torch.device] = None) -> MaskedAutoencoderPurifier:
    model = MaskedAutoencoderPurifier(config).to(dtype=dtype)
    if device is not None:
        model = model.to(device)
    logger.debug(f"Built purifier with {count_parameters(model)} parameters")
    return model
