"""Shared transformer substrate: Llama-style pre-norm blocks with rotary
positions, gated-SiLU MLPs, RMS normalization and its timestep-conditioned
adaptive variant, plus sinusoidal timestep embeddings.

Output projections (attention out, MLP down) are zero-initialized so a fresh
stack is the identity map, and the adaptive-norm conditioning projections are
zero-initialized so an untrained stack ignores the timestep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn
import torch.nn.functional as F

from .errors import ConfigError, InputError


@dataclass
class BlockConfig:
    hidden_size: int = 192
    intermediate_size: int = 768
    n_layers: int = 4
    n_heads: int = 4
    n_kv_heads: int | None = None
    attention_mode: str = "bidirectional"
    norm_mode: str = "rms"
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.n_kv_heads is None:
            self.n_kv_heads = self.n_heads
        if self.hidden_size % self.n_heads != 0:
            raise ConfigError("hidden_size must be divisible by n_heads")
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError("n_kv_heads must divide n_heads")
        if (self.hidden_size // self.n_heads) % 2 != 0:
            raise ConfigError("head dimension must be even for rotary embedding")
        if self.attention_mode not in ("bidirectional", "causal"):
            raise ConfigError(f"unknown attention_mode {self.attention_mode!r}")
        if self.norm_mode not in ("rms", "adaptive_rms"):
            raise ConfigError(f"unknown norm_mode {self.norm_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.n_heads


def rms_normalize(x: Tensor, eps: float = 1e-6) -> Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)


class RMSNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: Tensor, cond: Tensor | None = None) -> Tensor:
        return rms_normalize(x) * self.weight


class AdaptiveRMSNorm(nn.Module):
    """RMS normalization with scale/shift derived from a conditioning vector.

    With zero-initialized projections this is exactly plain RMSNorm.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.to_scale = nn.Linear(dim, dim)
        self.to_shift = nn.Linear(dim, dim)
        nn.init.zeros_(self.to_scale.weight)
        nn.init.zeros_(self.to_scale.bias)
        nn.init.zeros_(self.to_shift.weight)
        nn.init.zeros_(self.to_shift.bias)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        normed = rms_normalize(x)
        scale = self.to_scale(cond).unsqueeze(-2)  # broadcast over positions
        shift = self.to_shift(cond).unsqueeze(-2)
        return normed * (1.0 + scale) + shift


def rope_angles(positions: Tensor, head_dim: int, base: float = 10000.0) -> Tensor:
    if head_dim % 2 != 0:
        raise ConfigError("rotary embedding needs an even head dimension")
    inv_freq = base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    return positions.to(torch.float64)[..., None] * inv_freq


def rope_apply(x: Tensor, positions: Tensor, base: float = 10000.0) -> Tensor:
    """Rotate query/key pairs by position-dependent angles.

    x: [..., S, n_heads, head_dim]; positions: [S]. Norm-preserving per head,
    and rotated dot products depend only on position differences.
    """
    angles = rope_angles(positions, x.shape[-1], base).to(x.dtype)
    cos = angles.cos().unsqueeze(-2)  # [S, 1, head_dim/2] broadcasts over heads
    sin = angles.sin().unsqueeze(-2)
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x2 * cos + x1 * sin], dim=-1)


class TimestepEmbedding(nn.Module):
    """Sinusoidal features of a scalar t in [0, 1], refined by a 2-layer MLP."""

    def __init__(self, dim: int, max_freq: float = 1000.0):
        super().__init__()
        if dim % 2 != 0:
            raise ConfigError("timestep embedding dim must be even")
        self.dim = dim
        half = dim // 2
        self.register_buffer(
            "freqs", max_freq ** (torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
        )
        self.net = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: Tensor | float) -> Tensor:
        t = torch.as_tensor(t, dtype=self.freqs.dtype, device=self.freqs.device)
        if ((t < 0) | (t > 1)).any():
            raise InputError(f"timestep must lie in [0, 1], got {t}")
        angles = t[..., None] * self.freqs
        feats = torch.cat([angles.sin(), angles.cos()], dim=-1)
        return self.net(feats)


def _make_norm(config: BlockConfig) -> nn.Module:
    return AdaptiveRMSNorm(config.hidden_size) if config.norm_mode == "adaptive_rms" else RMSNorm(config.hidden_size)


class Attention(nn.Module):
    def __init__(self, config: BlockConfig):
        super().__init__()
        self.config = config
        d, hd = config.hidden_size, config.head_dim
        self.q_proj = nn.Linear(d, config.n_heads * hd, bias=False)
        self.k_proj = nn.Linear(d, config.n_kv_heads * hd, bias=False)
        self.v_proj = nn.Linear(d, config.n_kv_heads * hd, bias=False)
        self.o_proj = nn.Linear(config.n_heads * hd, d, bias=False)
        nn.init.zeros_(self.o_proj.weight)

    def forward(self, x: Tensor, positions: Tensor, mask: Tensor | None = None) -> Tensor:
        cfg = self.config
        *lead, s, _ = x.shape
        q = self.q_proj(x).reshape(*lead, s, cfg.n_heads, cfg.head_dim)
        k = self.k_proj(x).reshape(*lead, s, cfg.n_kv_heads, cfg.head_dim)
        v = self.v_proj(x).reshape(*lead, s, cfg.n_kv_heads, cfg.head_dim)
        q = rope_apply(q, positions, cfg.rope_base).transpose(-2, -3)
        k = rope_apply(k, positions, cfg.rope_base).transpose(-2, -3)
        v = v.transpose(-2, -3)
        if cfg.n_kv_heads != cfg.n_heads:
            repeat = cfg.n_heads // cfg.n_kv_heads
            k = k.repeat_interleave(repeat, dim=-3)
            v = v.repeat_interleave(repeat, dim=-3)
        attn_mask = None
        if mask is not None:
            # boolean key-validity mask [S] or [..., S] -> additive bias
            attn_mask = torch.where(mask, 0.0, float("-inf")).to(x.dtype)
            attn_mask = attn_mask[..., None, None, :]
        out = F.scaled_dot_product_attention(
            q, k, v, attn_mask=attn_mask, is_causal=cfg.attention_mode == "causal"
        )
        out = out.transpose(-2, -3).reshape(*lead, s, cfg.n_heads * cfg.head_dim)
        return self.o_proj(out)


class GatedMlp(nn.Module):
    def __init__(self, config: BlockConfig):
        super().__init__()
        d, m = config.hidden_size, config.intermediate_size
        self.gate_proj = nn.Linear(d, m, bias=False)
        self.up_proj = nn.Linear(d, m, bias=False)
        self.down_proj = nn.Linear(m, d, bias=False)
        nn.init.zeros_(self.down_proj.weight)

    def forward(self, x: Tensor) -> Tensor:
        return self.down_proj(F.silu(self.gate_proj(x)) * self.up_proj(x))


class Block(nn.Module):
    """Pre-norm residual block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, config: BlockConfig):
        super().__init__()
        self.config = config
        self.attn_norm = _make_norm(config)
        self.attn = Attention(config)
        self.mlp_norm = _make_norm(config)
        self.mlp = GatedMlp(config)

    def forward(
        self,
        x: Tensor,
        positions: Tensor | None = None,
        cond: Tensor | None = None,
        mask: Tensor | None = None,
    ) -> Tensor:
        if (cond is not None) != (self.config.norm_mode == "adaptive_rms"):
            raise InputError("cond must be given exactly when norm_mode is adaptive_rms")
        if positions is None:
            positions = torch.arange(x.shape[-2], device=x.device)
        x = x + self.attn(self._norm(self.attn_norm, x, cond), positions, mask)
        x = x + self.mlp(self._norm(self.mlp_norm, x, cond))
        return x

    @staticmethod
    def _norm(norm: nn.Module, x: Tensor, cond: Tensor | None) -> Tensor:
        return norm(x, cond) if isinstance(norm, AdaptiveRMSNorm) else norm(x)


class BlockStack(nn.Module):
    """n_layers blocks plus a final norm."""

    def __init__(self, config: BlockConfig):
        super().__init__()
        self.config = config
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.final_norm = _make_norm(config)

    def forward(
        self,
        x: Tensor,
        positions: Tensor | None = None,
        cond: Tensor | None = None,
        mask: Tensor | None = None,
    ) -> Tensor:
        for block in self.blocks:
            x = block(x, positions=positions, cond=cond, mask=mask)
        return Block._norm(self.final_norm, x, cond)
