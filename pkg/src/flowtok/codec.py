"""End-to-end codec: encoder + quantizer + flow decoder, the single-loss
training loop, decoder-only continued training, the public encode/decode API,
and a bit-exact binary checkpoint container.
"""

from __future__ import annotations

import binascii
import json
import math
import struct
from collections import deque
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from . import flow
from .corpus import MelConfig, MelSpectrogram, TtsUtterance, pad_frames_to_multiple
from .errors import CheckpointError, ConfigError, InputError, TrainingDiverged
from .flow import DiffusionDecoder, SamplerConfig, decoder_velocity_fn, euler_sample
from .nn_core import BlockConfig, BlockStack
from .quantizer import BsqQuantizer, QuantizerConfig, VqQuantizer, utilization

CHECKPOINT_MAGIC = b"FTCK"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class TrainerConfig:
    learning_rate: float = 3e-4
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_utterances: int = 4
    seed: int = 0
    grad_clip: float = 1.0
    continue_learning_rate: float = 1e-4
    log_every: int = 200
    checkpoint_every: int = 0  # 0: only on demand
    bsq_entropy_weight: float = 0.0  # experiment flag; objective is the diffusion loss alone


@dataclass
class CodecConfig:
    mel: MelConfig = field(default_factory=MelConfig)
    encoder: BlockConfig = field(
        default_factory=lambda: BlockConfig(192, 768, 3, 4, attention_mode="bidirectional")
    )
    decoder: BlockConfig = field(
        default_factory=lambda: BlockConfig(
            192, 768, 5, 4, attention_mode="bidirectional", norm_mode="adaptive_rms"
        )
    )
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    text_vocab: int = 64
    prompt_enabled: bool = True
    text_enabled: bool = True
    loss_type: str = "mse"

    def __post_init__(self):
        if self.encoder.attention_mode != "bidirectional":
            raise ConfigError("codec encoder must use bidirectional attention")
        if self.decoder.attention_mode != "bidirectional":
            raise ConfigError("codec decoder must use bidirectional attention")
        if self.decoder.norm_mode != "adaptive_rms":
            raise ConfigError("codec decoder must use adaptive_rms norm")
        if self.quantizer.model_dim != self.encoder.hidden_size:
            raise ConfigError("quantizer model_dim must equal encoder hidden size")

    @property
    def token_rate(self) -> float:
        return self.mel.frame_rate / self.quantizer.downsample_factor

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        d = dict(d)
        d["mel"] = MelConfig(**d["mel"])
        d["encoder"] = BlockConfig(**d["encoder"])
        d["decoder"] = BlockConfig(**d["decoder"])
        d["quantizer"] = QuantizerConfig(**d["quantizer"])
        d["trainer"] = TrainerConfig(**d["trainer"])
        return cls(**d)


def preset(name: str) -> CodecConfig:
    """Named configurations.

    desk: the default, small enough to overfit on a laptop CPU in minutes.
    tiny: for smoke tests and gradient checks.
    paper-scale: the production-sized recipe (8/16 x 1024 blocks, lr 7.5e-5,
    32K warmup, 800K steps); defined for completeness, never run by tests.
    """
    if name == "desk":
        return CodecConfig()
    if name == "tiny":
        return CodecConfig(
            encoder=BlockConfig(64, 256, 2, 2),
            decoder=BlockConfig(64, 256, 2, 2, norm_mode="adaptive_rms"),
            quantizer=QuantizerConfig(model_dim=64),
            trainer=TrainerConfig(total_steps=50, warmup_steps=10),
        )
    if name == "paper-scale":
        return CodecConfig(
            encoder=BlockConfig(1024, 4096, 8, 16),
            decoder=BlockConfig(1024, 4096, 16, 16, norm_mode="adaptive_rms"),
            quantizer=QuantizerConfig(model_dim=1024),
            trainer=TrainerConfig(
                learning_rate=7.5e-5, warmup_steps=32_000, total_steps=800_000
            ),
        )
    raise ConfigError(f"unknown preset {name!r}")


class Codec(nn.Module):
    """Mel -> tokens -> mel, trained end to end with the diffusion loss only
    (plus a commitment term in the vq variant)."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        d = config.mel.n_mels
        self.enc_in = nn.Linear(d, config.encoder.hidden_size)
        self.encoder = BlockStack(config.encoder)
        quant_cls = BsqQuantizer if config.quantizer.variant == "bsq" else VqQuantizer
        self.quantizer = quant_cls(config.quantizer, out_dim=config.decoder.hidden_size)
        self.decoder = DiffusionDecoder(config.decoder, d, config.text_vocab)

    # -- training-path pieces -------------------------------------------------

    def encoder_latents(self, mel: Tensor) -> Tensor:
        """[B, T, d] -> pre-quantization latents [B, T_q, L]; T must be a
        multiple of the downsample factor."""
        return self.quantizer.project_down(self.encoder(self.enc_in(mel)))

    def quantize_latents(self, h: Tensor):
        """Returns (conditioning [B, T, dec_hidden], token ids, aux loss)."""
        if self.config.quantizer.variant == "bsq":
            u_hat, ids = self.quantizer.quantize(h)
            aux = h.new_zeros(())
        else:
            u_hat, ids, aux = self.quantizer.quantize(h)
        return self.quantizer.project_up(u_hat), ids, aux

    # -- public API ------------------------------------------------------------

    def _as_frames(self, mel) -> Tensor:
        data = mel.data if isinstance(mel, MelSpectrogram) else mel
        data = torch.as_tensor(np.asarray(data), dtype=torch.float32)
        if data.ndim != 2 or data.shape[1] != self.config.mel.n_mels:
            raise InputError(
                f"expected mel of shape [T, {self.config.mel.n_mels}], got {tuple(data.shape)}"
            )
        return data

    def encode(self, mel) -> np.ndarray:
        """Deterministic tokenization of one utterance; frame count is padded
        up to a multiple of the downsample factor by repeating the last frame."""
        data = self._as_frames(mel).numpy()
        padded = torch.as_tensor(pad_frames_to_multiple(data, self.config.quantizer.downsample_factor))
        with torch.no_grad():
            h = self.encoder_latents(padded.unsqueeze(0))
            if self.config.quantizer.variant == "bsq":
                _, ids = self.quantizer.quantize(h)
            else:
                _, ids, _ = self.quantizer.quantize(h)
        return ids.squeeze(0).numpy()

    def conditioning_from_ids(self, tokens: np.ndarray | Tensor) -> Tensor:
        tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.int64)
        if ((tokens < 0) | (tokens >= self.config.quantizer.codebook_size)).any():
            raise InputError(
                f"token ids must lie in [0, {self.config.quantizer.codebook_size})"
            )
        with torch.no_grad():
            codes = self.quantizer.codes_from_ids(tokens).to(torch.float32)
            return self.quantizer.project_up(codes)

    def decode(
        self,
        tokens: np.ndarray | Tensor,
        text,
        sampler: SamplerConfig,
        rng: torch.Generator,
        prompt_mel: np.ndarray | Tensor | None = None,
    ) -> MelSpectrogram:
        """Tokens (+ text, + optional clean prompt prefix) -> mel, via Euler
        integration of the learned velocity field."""
        cond = self.conditioning_from_ids(tokens)
        frames = cond.shape[0]
        text_ids = _text_tensor(text, self.config.text_enabled)
        prompt = None
        prompt_len = 0
        if prompt_mel is not None:
            prompt = torch.as_tensor(np.asarray(prompt_mel), dtype=torch.float32)
            prompt_len = prompt.shape[0]
        velocity = decoder_velocity_fn(self.decoder, cond, text_ids, prompt_len)
        out = euler_sample(
            velocity, frames, self.config.mel.n_mels, sampler, rng, prompt_mel=prompt
        )
        return MelSpectrogram(out.numpy(), self.config.mel)


def _text_tensor(text, text_enabled: bool) -> Tensor:
    ids = getattr(text, "ids", text)
    if not text_enabled:
        ids = []
    return torch.as_tensor(list(ids), dtype=torch.int64)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainerState:
    step: int = 0
    step0_loss: float | None = None
    loss_history: deque = field(default_factory=lambda: deque(maxlen=4096))
    frozen: tuple[str, ...] = ()

    def record(self, step: int, loss: float) -> None:
        if self.step0_loss is None:
            self.step0_loss = loss
        self.loss_history.append((step, loss))
        self.step = step + 1


class Trainer:
    """Single-writer optimization loop owning the codec parameters."""

    def __init__(self, config: CodecConfig, corpus: list[TtsUtterance], codec: Codec | None = None):
        if not corpus:
            raise ConfigError("training corpus is empty")
        self.config = config
        self.codec = codec if codec is not None else Codec(config)
        self.state = TrainerState()
        self.rng = torch.Generator().manual_seed(config.trainer.seed)
        self.base_lr = config.trainer.learning_rate
        self.warmup_steps = config.trainer.warmup_steps
        self.decoder_only = False
        self.diagnostic_path = Path("diverged.ckpt")
        self.opt = torch.optim.AdamW(
            self.codec.parameters(), lr=self.base_lr, weight_decay=0.0
        )
        self._prepare_batches(corpus)
        self.utilization_log: list[dict] = []

    def _prepare_batches(self, corpus: list[TtsUtterance]) -> None:
        f = self.config.quantizer.downsample_factor
        buckets: dict[tuple[int, int], list[tuple[Tensor, Tensor]]] = {}
        for utt in corpus:
            mel = pad_frames_to_multiple(utt.mel.data, f)
            text = _text_tensor(utt.text, self.config.text_enabled)
            key = (mel.shape[0], text.shape[0])
            buckets.setdefault(key, []).append((torch.as_tensor(mel), text))
        self.buckets = list(buckets.values())
        weights = torch.tensor([len(b) for b in self.buckets], dtype=torch.float32)
        self.bucket_weights = weights / weights.sum()

    def _sample_batch(self) -> tuple[Tensor, Tensor]:
        bi = int(torch.multinomial(self.bucket_weights, 1, generator=self.rng))
        bucket = self.buckets[bi]
        idx = torch.randint(len(bucket), (self.config.trainer.batch_utterances,), generator=self.rng)
        mels = torch.stack([bucket[i][0] for i in idx])
        texts = torch.stack([bucket[i][1] for i in idx])
        return mels, texts

    def _lr_at(self, step: int) -> float:
        return self.base_lr * min(1.0, (step + 1) / max(self.warmup_steps, 1))

    def training_loss(self, mels: Tensor, texts: Tensor, encoder_grad: bool = True) -> Tensor:
        """One batched evaluation of the objective; gradient flows
        encoder -> quantizer (straight-through) -> decoder."""
        cfg = self.config
        b, frames, _ = mels.shape
        with torch.enable_grad() if encoder_grad else torch.no_grad():
            h = self.codec.encoder_latents(mels)
            cond, ids, aux = self.codec.quantize_latents(h)
        if not encoder_grad:
            cond = cond.detach()
            aux = aux.detach()
        t = torch.rand(b, generator=self.rng)
        noise = torch.randn(mels.shape, generator=self.rng)
        if cfg.prompt_enabled:
            lens = torch.tensor([flow.sample_prompt_len(frames, self.rng) for _ in range(b)])
        else:
            lens = torch.zeros(b, dtype=torch.int64)
        prompt_mask = torch.arange(frames)[None, :] < lens[:, None]
        x_t = flow.interpolate(mels, noise, t[:, None, None])
        x_t = torch.where(prompt_mask[..., None], mels, x_t)
        v = flow.velocity_target(mels, noise)
        v_hat = self.codec.decoder(x_t, cond, prompt_mask.long(), t, texts)
        loss = flow.masked_velocity_loss(v_hat, v, ~prompt_mask, cfg.loss_type)
        if cfg.quantizer.variant == "vq":
            loss = loss + aux
            self.utilization_log.append(utilization(ids, cfg.quantizer.codebook_size))
        if cfg.trainer.bsq_entropy_weight > 0 and cfg.quantizer.variant == "bsq":
            # soft per-dimension bit balance bonus; off by default
            p = torch.sigmoid(4.0 * h).mean(dim=(0, 1)).clamp(1e-6, 1 - 1e-6)
            entropy = -(p * p.log() + (1 - p) * (1 - p).log()).mean()
            loss = loss - cfg.trainer.bsq_entropy_weight * entropy
        return loss

    def step(self) -> float:
        mels, texts = self._sample_batch()
        loss = self.training_loss(mels, texts, encoder_grad=not self.decoder_only)
        if not torch.isfinite(loss):
            save_checkpoint(self.diagnostic_path, self.codec, step=self.state.step, rng=self.rng)
            raise TrainingDiverged(
                f"non-finite loss at step {self.state.step}; "
                f"diagnostic checkpoint at {self.diagnostic_path}"
            )
        for group in self.opt.param_groups:
            group["lr"] = self._lr_at(self.state.step)
        self.opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(
            [p for p in self.codec.parameters() if p.requires_grad],
            self.config.trainer.grad_clip,
        )
        self.opt.step()
        value = float(loss.detach())
        self.state.record(self.state.step, value)
        return value

    def train(self, n_steps: int | None = None, quiet: bool = True) -> None:
        n = n_steps if n_steps is not None else self.config.trainer.total_steps
        for _ in range(n):
            value = self.step()
            if not quiet and self.state.step % self.config.trainer.log_every == 0:
                print(f"step {self.state.step}: loss {value:.4f}")


def frozen_parameter_names(codec: Codec) -> tuple[str, ...]:
    return tuple(
        name
        for name, _ in codec.named_parameters()
        if name.startswith(("enc_in", "encoder", "quantizer"))
    )


def continue_train_decoder(
    codec: Codec,
    corpus: list[TtsUtterance],
    extra_steps: int,
    seed: int = 0,
    learning_rate: float | None = None,
) -> TrainerState:
    """Decoder-only continued training: encoder and quantizer parameters are
    bit-identical before and after, so token ids are unchanged."""
    trainer = Trainer(codec.config, corpus, codec=codec)
    trainer.rng = torch.Generator().manual_seed(seed)
    trainer.decoder_only = True
    trainer.base_lr = (
        learning_rate if learning_rate is not None else codec.config.trainer.continue_learning_rate
    )
    trainer.warmup_steps = 1
    frozen = frozen_parameter_names(codec)
    for name, p in codec.named_parameters():
        p.requires_grad_(name not in frozen)
    trainer.opt = torch.optim.AdamW(codec.decoder.parameters(), lr=trainer.base_lr, weight_decay=0.0)
    trainer.state.frozen = frozen
    try:
        trainer.train(extra_steps)
    finally:
        for p in codec.parameters():
            p.requires_grad_(True)
    return trainer.state


# ---------------------------------------------------------------------------
# Checkpoint container


@dataclass
class Checkpoint:
    kind: str
    config: dict
    arrays: dict[str, np.ndarray]
    step: int
    version: int = CHECKPOINT_VERSION


def _params_to_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {name: tensor.detach().numpy().copy() for name, tensor in module.state_dict().items()}


def save_checkpoint(
    path: str | Path,
    model: nn.Module,
    step: int = 0,
    rng: torch.Generator | None = None,
    kind: str = "codec",
    config: dict | None = None,
) -> None:
    """Single-file container: magic, version, UTF-8 JSON config blob, array
    table (name, dtype, shape, offset, crc32), then raw little-endian data."""
    if config is None:
        config = model.config.to_dict() if hasattr(model.config, "to_dict") else asdict(model.config)
    arrays = _params_to_arrays(model)
    if rng is not None:
        arrays["_rng_state"] = rng.get_state().numpy().astype(np.uint8)
    meta = {"kind": kind, "config": config, "step": int(step)}
    meta_blob = json.dumps(meta).encode("utf-8")

    table = bytearray()
    payload = bytearray()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        if np.dtype(dtype) not in _DTYPE_CODES:
            arr = arr.astype("<f4")
            dtype = arr.dtype
        raw = arr.astype(dtype, copy=False).tobytes()
        name_b = name.encode("utf-8")
        table += struct.pack("<H", len(name_b)) + name_b
        table += struct.pack("<BB", _DTYPE_CODES[np.dtype(dtype)], arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<QI", len(payload), binascii.crc32(raw))
        payload += raw

    blob = (
        CHECKPOINT_MAGIC
        + struct.pack("<I", CHECKPOINT_VERSION)
        + struct.pack("<I", len(meta_blob))
        + meta_blob
        + struct.pack("<I", len(arrays))
        + bytes(table)
        + struct.pack("<Q", len(payload))
        + bytes(payload)
    )
    Path(path).write_bytes(blob)


def _config_diff(expected: dict, found: dict, prefix: str = "") -> list[str]:
    diffs = []
    for key in sorted(set(expected) | set(found)):
        a, b = expected.get(key), found.get(key)
        label = f"{prefix}{key}"
        if isinstance(a, dict) and isinstance(b, dict):
            diffs += _config_diff(a, b, label + ".")
        elif a != b:
            diffs.append(f"{label}: expected {a!r}, checkpoint has {b!r}")
    return diffs


def load_checkpoint(path: str | Path, expect_config: dict | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    if len(raw) < 12 or view[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version}, this runtime reads {CHECKPOINT_VERSION}"
        )
    (meta_len,) = struct.unpack_from("<I", view, 8)
    off = 12
    try:
        meta = json.loads(bytes(view[off : off + meta_len]).decode("utf-8"))
        off += meta_len
        (n_arrays,) = struct.unpack_from("<I", view, off)
        off += 4
        entries = []
        for _ in range(n_arrays):
            (name_len,) = struct.unpack_from("<H", view, off)
            off += 2
            name = bytes(view[off : off + name_len]).decode("utf-8")
            off += name_len
            dtype_code, ndim = struct.unpack_from("<BB", view, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", view, off)
            off += 4 * ndim
            data_off, crc = struct.unpack_from("<QI", view, off)
            off += 12
            entries.append((name, dtype_code, shape, data_off, crc))
        (payload_len,) = struct.unpack_from("<Q", view, off)
        off += 8
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header: {exc}") from exc
    payload = view[off : off + payload_len]

    arrays = {}
    for name, dtype_code, shape, data_off, crc in entries:
        dtype = _CODE_DTYPES.get(dtype_code)
        if dtype is None:
            raise CheckpointError(f"{path}: array {name!r} has unknown dtype code {dtype_code}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
        chunk = bytes(payload[data_off : data_off + nbytes])
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: array {name!r} is truncated")
        if binascii.crc32(chunk) != crc:
            raise CheckpointError(f"{path}: array {name!r} failed its integrity check")
        arrays[name] = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()

    if expect_config is not None:
        diffs = _config_diff(expect_config, meta["config"])
        if diffs:
            raise CheckpointError(
                f"{path}: checkpoint config does not match this runtime:\n  " + "\n  ".join(diffs)
            )
    return Checkpoint(
        kind=meta["kind"], config=meta["config"], arrays=arrays, step=meta["step"]
    )


def codec_from_checkpoint(ckpt: Checkpoint) -> Codec:
    if ckpt.kind != "codec":
        raise CheckpointError(f"expected a codec checkpoint, found kind {ckpt.kind!r}")
    codec = Codec(CodecConfig.from_dict(ckpt.config))
    state = {
        name: torch.as_tensor(arr)
        for name, arr in ckpt.arrays.items()
        if not name.startswith("_")
    }
    codec.load_state_dict(state)
    return codec


def load_codec(path: str | Path, expect_config: dict | None = None) -> Codec:
    return codec_from_checkpoint(load_checkpoint(path, expect_config))
