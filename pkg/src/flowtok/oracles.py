"""Deterministic loss closures for the finite-difference gradient oracle.

Each target returns (loss_fn, params, signs_fn): loss_fn re-evaluates the same
fixed batch every call, params are the float64 leaf tensors to probe, and
signs_fn (diffusion only) exposes the quantizer sign pattern so probes that
straddle a sign boundary can be redrawn.
"""

from __future__ import annotations

import numpy as np
import torch

from . import flow
from .codec import Codec, CodecConfig, TrainerConfig
from .corpus import CorpusSpec, generate_corpus
from .errors import ConfigError
from .lm import ArModel, LmConfig, LmVocab, MgmModel, ar_loss, mgm_loss
from .nn_core import BlockConfig
from .quantizer import QuantizerConfig, sign_plus, sphere_project


def _randomize(module: torch.nn.Module, seed: int) -> None:
    """Fan-in-scaled random parameters everywhere, including the projections
    that train-time init zeroes; keeps every gradient pathway alive so the
    finite-difference comparison is numerically meaningful."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            std = 1.0 / (p.shape[-1] ** 0.5) if p.ndim >= 2 else 0.05
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


def _named_params(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return dict(module.named_parameters())


def tiny_codec_config() -> CodecConfig:
    return CodecConfig(
        encoder=BlockConfig(32, 64, 2, 2),
        decoder=BlockConfig(32, 64, 2, 2, norm_mode="adaptive_rms"),
        quantizer=QuantizerConfig(latent_dim=6, downsample_factor=8, model_dim=32),
        trainer=TrainerConfig(),
    )


def build_gradcheck_target(target: str, seed: int = 0):
    if target == "toy":
        gen = torch.Generator().manual_seed(seed)
        w = torch.randn(8, generator=gen, dtype=torch.float64, requires_grad=True)
        curvature = torch.rand(8, generator=gen, dtype=torch.float64) + 0.5

        def toy_loss():
            return (curvature * w**2).sum() + w.sum()

        return toy_loss, {"w": w}, None

    if target == "diffusion":
        config = tiny_codec_config()
        codec = Codec(config).double()
        _randomize(codec, seed)
        spec = CorpusSpec(n_utterances=1, symbols_min=2, symbols_max=2, seed=seed, frames_per_symbol=8)
        utt = generate_corpus(spec)[0]
        mel = torch.as_tensor(utt.mel.data, dtype=torch.float64).unsqueeze(0)
        text = torch.as_tensor(list(utt.text.ids)).unsqueeze(0)
        gen = torch.Generator().manual_seed(seed + 1)
        t = torch.rand(1, generator=gen, dtype=torch.float64) * 0.8 + 0.1
        noise = torch.randn(mel.shape, generator=gen, dtype=torch.float64)
        prompt_len = 2
        prompt_mask = torch.arange(mel.shape[1])[None, :] < prompt_len
        scale = 1.0 / config.quantizer.latent_dim**0.5

        # The true loss is piecewise constant in the encoder parameters (the
        # sign quantizer flattens them), so a finite difference of it says
        # nothing about the straight-through gradient. Freezing the
        # stop-gradient residue at its baseline value gives a smooth surrogate
        # that agrees with the true loss and with its autograd gradient at the
        # baseline point, which is exactly what the estimator claims.
        with torch.no_grad():
            u0 = sphere_project(codec.encoder_latents(mel))
            frozen_residue = sign_plus(u0) - u0

        def diffusion_loss_fn():
            h = codec.encoder_latents(mel)
            u_hat = (sphere_project(h) + frozen_residue) * scale
            cond = codec.quantizer.project_up(u_hat)
            x_t = flow.interpolate(mel, noise, t[:, None, None])
            x_t = torch.where(prompt_mask[..., None], mel, x_t)
            v = flow.velocity_target(mel, noise)
            v_hat = codec.decoder(x_t, cond, prompt_mask.long(), t, text)
            return flow.masked_velocity_loss(v_hat, v, ~prompt_mask)

        def signs_fn():
            with torch.no_grad():
                h = codec.encoder_latents(mel)
            return (h >= 0).numpy()

        return diffusion_loss_fn, _named_params(codec), signs_fn

    if target in ("ar", "mgm"):
        vocab = LmVocab(text_size=16, latent_bits=5)
        block = BlockConfig(
            32, 64, 2, 2, attention_mode="causal" if target == "ar" else "bidirectional"
        )
        config = LmConfig(block=block, vocab=vocab, kind=target)
        model = (ArModel if target == "ar" else MgmModel)(config).double()
        _randomize(model, seed)
        rng = np.random.default_rng(seed)
        tokens = rng.integers(0, vocab.speech_size, size=10)
        text = [int(x) for x in rng.integers(0, vocab.text_size, size=4)]

        if target == "ar":
            def ar_loss_fn():
                return ar_loss(model, tokens, text)

            return ar_loss_fn, _named_params(model), None

        def mgm_loss_fn():
            # identical Bernoulli mask draw on every call
            mask_rng = torch.Generator().manual_seed(seed + 2)
            return mgm_loss(model, tokens, text, t=0.7, rng=mask_rng)

        return mgm_loss_fn, _named_params(model), None

    raise ConfigError(f"unknown gradcheck target {target!r}")
