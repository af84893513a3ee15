"""Flow-matching objective and sampler: linear interpolation path, velocity
regression, the clean-prefix prompt mechanism, text conditioning along the
time axis, and Euler ODE integration for de-tokenization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .errors import ConfigError, InputError
from .nn_core import BlockConfig, BlockStack, TimestepEmbedding

PROMPT_FRACTION = 0.25

# Counts loss evaluations where every frame fell inside the prompt; such a
# batch contributes zero loss rather than NaN.
_empty_mask_count = 0


def empty_mask_count() -> int:
    return _empty_mask_count


def reset_empty_mask_count() -> None:
    global _empty_mask_count
    _empty_mask_count = 0


@dataclass
class SamplerConfig:
    n_steps: int = 32

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError("sampler needs at least one step")


SAMPLER_PRESETS = {f"steps{n}": SamplerConfig(n) for n in (5, 10, 25, 32, 50)}


@dataclass
class FlowBatch:
    """Everything one training example of the diffusion loss consumes.

    Invariants: x_t equals t*x + (1-t)*noise on non-prompt frames and equals x
    exactly on the first prompt_len frames; loss_mask is False exactly there;
    v = x - noise regardless of t.
    """

    x: Tensor
    noise: Tensor
    t: Tensor
    x_t: Tensor
    v: Tensor
    prompt_len: int
    loss_mask: Tensor
    text: Tensor
    tokens_cond: Tensor


def interpolate(x: Tensor, noise: Tensor, t: Tensor | float) -> Tensor:
    """x_t = t * x + (1 - t) * noise."""
    if x.shape != noise.shape:
        raise InputError(f"shape mismatch {tuple(x.shape)} vs {tuple(noise.shape)}")
    t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
    if ((t < 0) | (t > 1)).any():
        raise InputError("t must lie in [0, 1]")
    return t * x + (1.0 - t) * noise


def velocity_target(x: Tensor, noise: Tensor) -> Tensor:
    """v = x - noise; the time derivative of the interpolation path."""
    if x.shape != noise.shape:
        raise InputError(f"shape mismatch {tuple(x.shape)} vs {tuple(noise.shape)}")
    return x - noise


def sample_prompt_len(total_frames: int, rng: torch.Generator) -> int:
    """l = floor(u * 0.25 * total_frames) with u ~ Uniform[0, 1)."""
    if total_frames <= 0:
        return 0
    u = torch.rand((), generator=rng).item()
    return int(u * PROMPT_FRACTION * total_frames)


def assemble_batch(
    x: Tensor,
    text: Tensor,
    tokens_cond: Tensor,
    rng: torch.Generator,
    t_override: float | None = None,
    prompt_enabled: bool = True,
) -> FlowBatch:
    """Single-utterance training example: draws t (uniform unless overridden)
    and the noise, keeps a clean prompt prefix, and masks it out of the loss."""
    if tokens_cond.shape[0] != x.shape[0]:
        raise InputError(
            f"tokens_cond covers {tokens_cond.shape[0]} frames, mel has {x.shape[0]}"
        )
    frames = x.shape[0]
    if t_override is not None:
        t = torch.as_tensor(float(t_override), dtype=x.dtype)
    else:
        t = torch.rand((), generator=rng, dtype=x.dtype)
    noise = torch.randn(x.shape, generator=rng, dtype=x.dtype)
    prompt_len = sample_prompt_len(frames, rng) if prompt_enabled else 0
    x_t = interpolate(x, noise, t)
    x_t[:prompt_len] = x[:prompt_len]
    loss_mask = torch.ones(frames, dtype=torch.bool)
    loss_mask[:prompt_len] = False
    return FlowBatch(
        x=x,
        noise=noise,
        t=t,
        x_t=x_t,
        v=velocity_target(x, noise),
        prompt_len=prompt_len,
        loss_mask=loss_mask,
        text=text,
        tokens_cond=tokens_cond,
    )


class DiffusionDecoder(nn.Module):
    """Bidirectional transformer predicting the velocity field.

    The input sequence is [text embeddings ; frame stream] along time. Each
    speech frame is the sum of projected x_t, projected token conditioning,
    and a prompt-indicator embedding; every position is modulated by the
    timestep embedding through adaptive RMS norms. The output head reads only
    the speech positions.
    """

    def __init__(self, config: BlockConfig, mel_dim: int, text_vocab: int):
        super().__init__()
        if config.norm_mode != "adaptive_rms" or config.attention_mode != "bidirectional":
            raise ConfigError("decoder blocks must be bidirectional with adaptive_rms")
        self.config = config
        self.mel_dim = mel_dim
        self.text_embed = nn.Embedding(text_vocab, config.hidden_size)
        self.frame_in = nn.Linear(mel_dim, config.hidden_size)
        self.cond_in = nn.Linear(config.hidden_size, config.hidden_size)
        self.prompt_embed = nn.Embedding(2, config.hidden_size)
        self.time_embed = TimestepEmbedding(config.hidden_size)
        self.blocks = BlockStack(config)
        self.out = nn.Linear(config.hidden_size, mel_dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(
        self,
        x_t: Tensor,
        tokens_cond: Tensor,
        prompt_flags: Tensor,
        t: Tensor | float,
        text: Tensor,
    ) -> Tensor:
        """x_t: [B, T, d]; tokens_cond: [B, T, hidden]; prompt_flags: [B, T]
        ints in {0, 1}; t: scalar or [B]; text: [B, Lt] (Lt may be 0)."""
        if x_t.shape[:2] != tokens_cond.shape[:2]:
            raise InputError("x_t and tokens_cond disagree on batch/frame count")
        frames = self.frame_in(x_t) + self.cond_in(tokens_cond) + self.prompt_embed(prompt_flags)
        text_len = text.shape[-1]
        seq = torch.cat([self.text_embed(text), frames], dim=-2)
        t = torch.as_tensor(t, dtype=x_t.dtype)
        if t.ndim == 0:
            t = t.expand(x_t.shape[0])
        cond = self.time_embed(t)
        hidden = self.blocks(seq, cond=cond)
        return self.out(hidden[..., text_len:, :])


def decoder_forward(decoder: DiffusionDecoder, batch: FlowBatch) -> Tensor:
    """Velocity prediction for one assembled example."""
    prompt_flags = (~batch.loss_mask).long()
    return decoder(
        batch.x_t.unsqueeze(0),
        batch.tokens_cond.unsqueeze(0),
        prompt_flags.unsqueeze(0),
        batch.t,
        batch.text.unsqueeze(0),
    ).squeeze(0)


def masked_velocity_loss(
    v_hat: Tensor, v: Tensor, loss_mask: Tensor, loss_type: str = "mse"
) -> Tensor:
    """Regression error between v and v_hat over unmasked frames, averaged
    over frames and mel bins. Returns 0 when every frame is masked out."""
    global _empty_mask_count
    if not loss_mask.any():
        _empty_mask_count += 1
        return v_hat.sum() * 0.0
    diff = (v_hat - v)[loss_mask]
    if loss_type == "mse":
        return diff.pow(2).mean()
    if loss_type == "l1":
        return diff.abs().mean()
    raise ConfigError(f"unknown loss_type {loss_type!r}")


def diffusion_loss(batch: FlowBatch, decoder: DiffusionDecoder, loss_type: str = "mse") -> Tensor:
    return masked_velocity_loss(decoder_forward(decoder, batch), batch.v, batch.loss_mask, loss_type)


def euler_sample(
    velocity_fn,
    frames: int,
    mel_dim: int,
    sampler: SamplerConfig,
    rng: torch.Generator,
    prompt_mel: Tensor | None = None,
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """Integrate dx/dt = velocity_fn(x, t) from t=0 (noise) to t=1 on a
    uniform grid. Prompt frames are clamped to prompt_mel at every step and
    returned unchanged.
    """
    n = sampler.n_steps
    prompt_len = 0 if prompt_mel is None else prompt_mel.shape[0]
    if prompt_len >= frames and frames > 0 and prompt_len > 0:
        raise InputError("prompt must be shorter than the output")
    x = torch.randn(frames, mel_dim, generator=rng, dtype=dtype)
    if prompt_len:
        x[:prompt_len] = prompt_mel
    dt = 1.0 / n
    for i in range(n):
        v_hat = velocity_fn(x, i * dt)
        x = x + dt * v_hat
        if prompt_len:
            x[:prompt_len] = prompt_mel
    return x


def decoder_velocity_fn(
    decoder: DiffusionDecoder, tokens_cond: Tensor, text: Tensor, prompt_len: int
):
    """Wraps the decoder as a velocity field over a single utterance."""
    prompt_flags = torch.zeros(tokens_cond.shape[0], dtype=torch.long)
    prompt_flags[:prompt_len] = 1

    def velocity(x: Tensor, t: float) -> Tensor:
        with torch.no_grad():
            return decoder(
                x.unsqueeze(0),
                tokens_cond.unsqueeze(0),
                prompt_flags.unsqueeze(0),
                t,
                text.unsqueeze(0),
            ).squeeze(0)

    return velocity
