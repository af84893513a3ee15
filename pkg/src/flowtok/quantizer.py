"""Binary spherical quantization of latent sequences, with straight-through
gradients and the index<->code bijection, plus a plain-VQ baseline for
ablations.

The implicit codebook is the set of hypercube corners {-1/sqrt(L), +1/sqrt(L)}^L
projected onto the unit sphere; token k encodes the sign pattern bitwise with
dimension i as bit i-1. sign(0) is defined as +1 throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .errors import ConfigError, InputError


@dataclass
class QuantizerConfig:
    latent_dim: int = 14
    downsample_factor: int = 16
    model_dim: int = 192
    variant: str = "bsq"
    vq_commit_weight: float = 0.25

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.downsample_factor < 1:
            raise ConfigError("downsample_factor must be >= 1")
        if self.variant not in ("bsq", "vq"):
            raise ConfigError(f"unknown quantizer variant {self.variant!r}")

    @property
    def codebook_size(self) -> int:
        return 2**self.latent_dim


def sign_plus(x: Tensor) -> Tensor:
    """Elementwise sign with sign(0) = 1."""
    return torch.where(x >= 0, x.new_ones(()), -x.new_ones(()))


def ste_sign(x: Tensor) -> Tensor:
    """sign(x) in the forward pass, identity in the backward pass."""
    return x + (sign_plus(x) - x).detach()


def sphere_project(h: Tensor) -> Tensor:
    """Project rows onto the unit sphere; a zero row maps to the all-positive
    direction (the only degenerate case, consistent with sign(0) = 1)."""
    norm = h.norm(dim=-1, keepdim=True)
    l = h.shape[-1]
    uniform = h.new_full(h.shape, 1.0 / math.sqrt(l))
    return torch.where(norm > 0, h / norm.clamp_min(1e-30), uniform)


def token_index(h: Tensor) -> Tensor:
    """k = sum_i 1[h_i >= 0] * 2^(i-1); zero entries count as positive."""
    bits = (h >= 0).to(torch.int64)
    powers = torch.pow(2, torch.arange(h.shape[-1], device=h.device))
    return (bits * powers).sum(dim=-1)


def code_of_index(k: Tensor | int, latent_dim: int) -> Tensor:
    """Inverse of token_index: codebook corner for token id k."""
    k = torch.as_tensor(k, dtype=torch.int64)
    if ((k < 0) | (k >= 2**latent_dim)).any():
        raise InputError(f"token id out of range [0, 2^{latent_dim})")
    bits = (k.unsqueeze(-1) >> torch.arange(latent_dim, device=k.device)) & 1
    return (2.0 * bits - 1.0) / math.sqrt(latent_dim)


def bsq_quantize(h: Tensor) -> tuple[Tensor, Tensor]:
    """Quantize latent rows to codebook corners.

    Returns (u_hat, token ids). Forward values are exactly
    sign(h / ||h||) / sqrt(L); gradients flow to h through the sphere
    projection with the sign treated as identity.
    """
    u = sphere_project(h)
    u_hat = ste_sign(u) / math.sqrt(h.shape[-1])
    return u_hat, token_index(h)


class _LatentProjector(nn.Module):
    """Shared frame stacking + linear maps on either side of quantization."""

    def __init__(self, config: QuantizerConfig, out_dim: int | None = None):
        super().__init__()
        self.config = config
        self.out_dim = out_dim if out_dim is not None else config.model_dim
        f, l = config.downsample_factor, config.latent_dim
        self.down = nn.Linear(f * config.model_dim, l)
        self.up = nn.Linear(l, f * self.out_dim)

    def project_down(self, x: Tensor) -> Tensor:
        """[..., T, model_dim] -> [..., T/F, L]; T must already be a multiple
        of F (padding is the caller's contract)."""
        f = self.config.downsample_factor
        t = x.shape[-2]
        if t % f != 0:
            raise InputError(f"frame count {t} not a multiple of downsample factor {f}")
        stacked = x.reshape(*x.shape[:-2], t // f, f * x.shape[-1])
        return self.down(stacked)

    def project_up(self, u_hat: Tensor) -> Tensor:
        """[..., T_q, L] -> [..., T_q * F, out_dim]."""
        f = self.config.downsample_factor
        expanded = self.up(u_hat)
        return expanded.reshape(*u_hat.shape[:-2], u_hat.shape[-2] * f, self.out_dim)


class BsqQuantizer(_LatentProjector):
    """Lookup-free quantizer: sphere normalization + per-dimension signs."""

    def quantize(self, h: Tensor) -> tuple[Tensor, Tensor]:
        return bsq_quantize(h)

    def codes_from_ids(self, ids: Tensor) -> Tensor:
        return code_of_index(ids, self.config.latent_dim)


class VqQuantizer(_LatentProjector):
    """Explicit-codebook baseline of the same codebook size.

    Nearest-neighbour lookup with ties broken toward the lowest index. The
    straight-through output passes gradients both to the input (identity) and
    to the selected codeword, so the codebook trains from the task loss; the
    returned commitment term pulls inputs toward their codewords.
    """

    def __init__(self, config: QuantizerConfig, out_dim: int | None = None):
        super().__init__(config, out_dim)
        l = config.latent_dim
        self.codebook = nn.Parameter(torch.randn(config.codebook_size, l) / math.sqrt(l))

    def quantize(self, h: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        flat = h.reshape(-1, h.shape[-1])
        dists = (
            flat.pow(2).sum(-1, keepdim=True)
            - 2.0 * flat @ self.codebook.T
            + self.codebook.pow(2).sum(-1)
        )
        ids = dists.argmin(dim=-1)  # argmin returns the first (lowest) index on ties
        chosen = self.codebook[ids]
        h_hat = chosen + (flat - flat.detach())
        commit = self.config.vq_commit_weight * (flat - chosen.detach()).pow(2).mean()
        return h_hat.reshape(h.shape), ids.reshape(h.shape[:-1]), commit

    def codes_from_ids(self, ids: Tensor) -> Tensor:
        return self.codebook[ids]


def utilization(ids: Tensor, codebook_size: int) -> dict:
    """Distinct-id usage summary for one batch of token ids."""
    unique = torch.unique(ids)
    return {
        "distinct": int(unique.numel()),
        "fraction": float(unique.numel() / codebook_size),
    }
