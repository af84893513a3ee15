"""Speech language models over codec tokens: an autoregressive text-to-token
model and a masked-generative model with schedule-driven iterative decoding.

Both share one joint id space: text ids, then speech ids, then the specials
BOS / EOS / MASK / PAD. They read and write the plain token interchange format
(one line per utterance: utt_id followed by decimal ids).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import Tensor, nn
import torch.nn.functional as F

from .errors import ConfigError, InputError
from .nn_core import BlockConfig, BlockStack

# Counts mgm_loss evaluations where the Bernoulli draw masked nothing; those
# contribute zero loss rather than NaN.
_empty_mgm_mask_count = 0


def empty_mgm_mask_count() -> int:
    return _empty_mgm_mask_count


@dataclass(frozen=True)
class LmVocab:
    """Joint id space: [0, text_size) text, then 2^latent_bits speech ids,
    then BOS, EOS, MASK, PAD."""

    text_size: int = 64
    latent_bits: int = 14

    @property
    def speech_size(self) -> int:
        return 2**self.latent_bits

    @property
    def speech_offset(self) -> int:
        return self.text_size

    @property
    def bos(self) -> int:
        return self.text_size + self.speech_size

    @property
    def eos(self) -> int:
        return self.bos + 1

    @property
    def mask(self) -> int:
        return self.bos + 2

    @property
    def pad(self) -> int:
        return self.bos + 3

    @property
    def total_size(self) -> int:
        return self.bos + 4

    def speech_to_joint(self, tokens) -> Tensor:
        tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.int64)
        if ((tokens < 0) | (tokens >= self.speech_size)).any():
            raise InputError(f"speech token outside [0, {self.speech_size})")
        return tokens + self.speech_offset

    def joint_to_speech(self, joint: Tensor) -> Tensor:
        return joint - self.speech_offset


@dataclass
class MaskSchedule:
    """gamma(t) = sin(pi * t / (2 * horizon)) on (0, horizon]."""

    horizon: float = 1.0
    steps: int = 25

    def __post_init__(self):
        if self.horizon <= 0:
            raise ConfigError("schedule horizon must be positive")
        if self.steps < 1:
            raise ConfigError("schedule needs at least one step")


def gamma(t: float, schedule: MaskSchedule) -> float:
    if t <= 0 or t > schedule.horizon:
        raise InputError(f"t must lie in (0, {schedule.horizon}], got {t}")
    return math.sin(math.pi * t / (2.0 * schedule.horizon))


@dataclass
class MgmState:
    """Iterative decoding state over the speech positions."""

    sequence: Tensor  # joint ids with MASK placeholders
    mask: Tensor  # True where masked
    step: int
    scores: Tensor


@dataclass
class LmConfig:
    block: BlockConfig = field(
        default_factory=lambda: BlockConfig(192, 768, 4, 4, attention_mode="causal")
    )
    vocab: LmVocab = field(default_factory=LmVocab)
    kind: str = "ar"
    learning_rate: float = 1e-3
    warmup_steps: int = 50
    total_steps: int = 1500
    batch_utterances: int = 8
    seed: int = 0
    grad_clip: float = 1.0
    max_context: int = 1024

    def __post_init__(self):
        if self.kind not in ("ar", "mgm"):
            raise ConfigError(f"unknown lm kind {self.kind!r}")
        wants_causal = self.kind == "ar"
        is_causal = self.block.attention_mode == "causal"
        if wants_causal != is_causal:
            raise ConfigError(f"{self.kind} model needs attention_mode="
                              f"{'causal' if wants_causal else 'bidirectional'}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LmConfig":
        d = dict(d)
        d["block"] = BlockConfig(**d["block"])
        d["vocab"] = LmVocab(**d["vocab"])
        return cls(**d)


def sequence_nll(logits: Tensor, targets: Tensor, loss_mask: Tensor) -> Tensor:
    """Mean negative log-likelihood over masked-in positions."""
    if not loss_mask.any():
        return logits.sum() * 0.0
    flat_logits = logits[loss_mask]
    flat_targets = targets[loss_mask]
    return F.cross_entropy(flat_logits, flat_targets)


class ArModel(nn.Module):
    """Causal transformer over [BOS, text, speech tokens, EOS]."""

    def __init__(self, config: LmConfig):
        super().__init__()
        self.config = config
        vocab = config.vocab
        self.embed = nn.Embedding(vocab.total_size, config.block.hidden_size)
        self.blocks = BlockStack(config.block)
        self.head = nn.Linear(config.block.hidden_size, vocab.total_size)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, ids: Tensor) -> Tensor:
        return self.head(self.blocks(self.embed(ids)))

    def build_sequence(self, tokens, text) -> Tensor:
        vocab = self.config.vocab
        text_ids = torch.as_tensor(list(getattr(text, "ids", text)), dtype=torch.int64)
        speech = vocab.speech_to_joint(tokens)
        return torch.cat(
            [
                torch.tensor([vocab.bos]),
                text_ids,
                speech,
                torch.tensor([vocab.eos]),
            ]
        )


def ar_loss(model: ArModel, tokens, text) -> Tensor:
    """NLL of the speech tokens (and EOS) given the text; text positions are
    excluded from the loss."""
    seq = model.build_sequence(tokens, text)
    if seq.shape[0] > model.config.max_context:
        raise InputError(f"sequence length {seq.shape[0]} exceeds context limit")
    return ar_loss_batch(model, seq.unsqueeze(0))


def ar_loss_batch(model: ArModel, sequences: Tensor) -> Tensor:
    """Batched variant over same-length [B, S] joint-id sequences."""
    vocab = model.config.vocab
    logits = model(sequences[:, :-1])
    targets = sequences[:, 1:]
    loss_mask = (targets >= vocab.speech_offset) & (targets < vocab.bos) | (targets == vocab.eos)
    return sequence_nll(logits, targets, loss_mask)


def ar_generate(
    model: ArModel,
    text,
    rng: torch.Generator,
    temperature: float = 1.0,
    top_k: int = 20,
    max_tokens: int = 64,
) -> np.ndarray:
    """Sample speech tokens until EOS; temperature 0 means greedy argmax.
    Output ids are always in the speech range, mapped back to [0, 2^L)."""
    vocab = model.config.vocab
    text_ids = torch.as_tensor(list(getattr(text, "ids", text)), dtype=torch.int64)
    seq = torch.cat([torch.tensor([vocab.bos]), text_ids])
    allowed = torch.full((vocab.total_size,), float("-inf"))
    allowed[vocab.speech_offset : vocab.bos] = 0.0
    allowed[vocab.eos] = 0.0
    out = []
    with torch.no_grad():
        for _ in range(max_tokens):
            logits = model(seq.unsqueeze(0))[0, -1] + allowed
            if temperature <= 0:
                nxt = int(logits.argmax())
            else:
                logits = logits / temperature
                if top_k > 0:
                    kth = torch.topk(logits, min(top_k, int(torch.isfinite(logits).sum()))).values[-1]
                    logits = torch.where(logits < kth, torch.full_like(logits, float("-inf")), logits)
                probs = F.softmax(logits, dim=-1)
                nxt = int(torch.multinomial(probs, 1, generator=rng))
            if nxt == vocab.eos:
                break
            out.append(nxt)
            seq = torch.cat([seq, torch.tensor([nxt])])
    return vocab.joint_to_speech(torch.tensor(out, dtype=torch.int64)).numpy()


class MgmModel(nn.Module):
    """Bidirectional transformer over [text ; masked speech tokens]; the head
    covers the speech vocabulary only."""

    def __init__(self, config: LmConfig):
        super().__init__()
        self.config = config
        vocab = config.vocab
        self.embed = nn.Embedding(vocab.total_size, config.block.hidden_size)
        self.blocks = BlockStack(config.block)
        self.head = nn.Linear(config.block.hidden_size, vocab.speech_size)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, text_ids: Tensor, speech_joint: Tensor) -> Tensor:
        """text_ids: [B, Lt]; speech_joint: [B, n] -> logits [B, n, speech]."""
        seq = torch.cat([text_ids, speech_joint], dim=-1)
        hidden = self.blocks(self.embed(seq))
        return self.head(hidden[..., text_ids.shape[-1] :, :])


def mgm_mask(tokens, t: float, rng: torch.Generator, vocab: LmVocab, schedule: MaskSchedule) -> MgmState:
    """Mask each position independently with probability gamma(t)."""
    joint = vocab.speech_to_joint(tokens)
    p = gamma(t, schedule)
    mask = torch.rand(joint.shape, generator=rng) < p
    masked = torch.where(mask, torch.full_like(joint, vocab.mask), joint)
    return MgmState(sequence=masked, mask=mask, step=0, scores=torch.zeros(joint.shape))


def mgm_loss(
    model: MgmModel,
    tokens,
    text,
    t: float,
    rng: torch.Generator,
    schedule: MaskSchedule | None = None,
) -> Tensor:
    """Cross-entropy over masked positions, normalized by the masked count."""
    global _empty_mgm_mask_count
    schedule = schedule or MaskSchedule()
    vocab = model.config.vocab
    state = mgm_mask(tokens, t, rng, vocab, schedule)
    text_ids = torch.as_tensor(list(getattr(text, "ids", text)), dtype=torch.int64)
    logits = model(text_ids.unsqueeze(0), state.sequence.unsqueeze(0)).squeeze(0)
    targets = torch.as_tensor(np.asarray(tokens), dtype=torch.int64)
    if not state.mask.any():
        _empty_mgm_mask_count += 1
    return sequence_nll(logits, targets, state.mask)


def mgm_decode(
    model: MgmModel,
    text,
    n: int,
    steps: int,
    rng: torch.Generator,
    schedule: MaskSchedule | None = None,
    temperature: float = 1.0,
    gumbel_tie_break: bool = False,
) -> tuple[np.ndarray, list[dict]]:
    """Iterative confidence-ranked unmasking.

    Starts fully masked. At step j, sample every masked position, score it by
    the probability of its sampled token (finalized positions score 1), then
    remask the floor(n * gamma(horizon - j*horizon/steps)) lowest-confidence
    positions; the final step remasks nothing. Ties break toward the lowest
    position index unless gumbel_tie_break adds sampling noise.

    Returns (speech ids, per-step trace records).
    """
    if n < 1 or steps < 1:
        raise InputError("need n >= 1 and steps >= 1")
    schedule = schedule or MaskSchedule(steps=steps)
    vocab = model.config.vocab
    text_ids = torch.as_tensor(list(getattr(text, "ids", text)), dtype=torch.int64)
    seq = torch.full((n,), vocab.mask, dtype=torch.int64)
    masked = torch.ones(n, dtype=torch.bool)
    trace = []
    with torch.no_grad():
        for j in range(1, steps + 1):
            logits = model(text_ids.unsqueeze(0), seq.unsqueeze(0)).squeeze(0)
            probs = F.softmax(logits / max(temperature, 1e-8), dim=-1)
            sampled = torch.multinomial(probs, 1, generator=rng).squeeze(-1)
            scores = torch.ones(n)
            scores[masked] = probs[masked].gather(-1, sampled[masked, None]).squeeze(-1)
            seq = torch.where(masked, vocab.speech_to_joint(sampled), seq)
            if j == steps:
                n_remask = 0
            else:
                t_next = schedule.horizon - j * schedule.horizon / steps
                n_remask = int(n * gamma(t_next, schedule))
            if n_remask > 0:
                ranking = scores.clone()
                if gumbel_tie_break:
                    noise = -torch.log(-torch.log(torch.rand(n, generator=rng)))
                    ranking = ranking + 1e-6 * noise
                order = torch.argsort(ranking, stable=True)
                remask_idx = order[:n_remask]
                seq[remask_idx] = vocab.mask
                masked = torch.zeros(n, dtype=torch.bool)
                masked[remask_idx] = True
            else:
                masked = torch.zeros(n, dtype=torch.bool)
            trace.append(
                {
                    "step": j,
                    "masked_count": int(masked.sum()),
                    "mean_confidence": float(scores.mean()),
                }
            )
    return vocab.joint_to_speech(seq).numpy(), trace


def fit_length_ratio(corpus_tokens: list[np.ndarray], corpus_texts: list) -> float:
    """Token-per-text-symbol ratio for length prediction at generation time."""
    total_tokens = sum(len(t) for t in corpus_tokens)
    total_text = sum(len(getattr(x, "ids", x)) for x in corpus_texts)
    return total_tokens / max(total_text, 1)


def predict_length(text, ratio: float) -> int:
    return max(1, round(ratio * len(getattr(text, "ids", text))))


# ---------------------------------------------------------------------------
# Training


class LmTrainer:
    """Joint trainer for both LM kinds; batches same-length sequences."""

    def __init__(self, config: LmConfig, token_rows: list[np.ndarray], texts: list):
        if not token_rows:
            raise ConfigError("no token sequences to train on")
        self.config = config
        self.model = ArModel(config) if config.kind == "ar" else MgmModel(config)
        self.rng = torch.Generator().manual_seed(config.seed)
        self.loss_history: list[float] = []
        vocab = config.vocab
        buckets: dict[tuple[int, int], list[tuple[Tensor, Tensor]]] = {}
        for tokens, text in zip(token_rows, texts):
            text_ids = torch.as_tensor(list(getattr(text, "ids", text)), dtype=torch.int64)
            speech = vocab.speech_to_joint(tokens)
            buckets.setdefault((text_ids.shape[0], speech.shape[0]), []).append((text_ids, speech))
        self.buckets = list(buckets.values())
        weights = torch.tensor([len(b) for b in self.buckets], dtype=torch.float32)
        self.bucket_weights = weights / weights.sum()
        self.opt = torch.optim.AdamW(self.model.parameters(), lr=config.learning_rate, weight_decay=0.0)
        self.schedule = MaskSchedule()
        self._step = 0

    def _sample_batch(self) -> tuple[Tensor, Tensor]:
        bi = int(torch.multinomial(self.bucket_weights, 1, generator=self.rng))
        bucket = self.buckets[bi]
        idx = torch.randint(len(bucket), (self.config.batch_utterances,), generator=self.rng)
        texts = torch.stack([bucket[i][0] for i in idx])
        speech = torch.stack([bucket[i][1] for i in idx])
        return texts, speech

    def _batch_loss(self, texts: Tensor, speech: Tensor) -> Tensor:
        vocab = self.config.vocab
        b = texts.shape[0]
        if self.config.kind == "ar":
            seqs = torch.cat(
                [
                    torch.full((b, 1), vocab.bos),
                    texts,
                    speech,
                    torch.full((b, 1), vocab.eos),
                ],
                dim=1,
            )
            return ar_loss_batch(self.model, seqs)
        t = max(float(torch.rand((), generator=self.rng)) * self.schedule.horizon, 1e-6)
        p = gamma(t, self.schedule)
        mask = torch.rand(speech.shape, generator=self.rng) < p
        masked_seq = torch.where(mask, torch.full_like(speech, vocab.mask), speech)
        logits = self.model(texts, masked_seq)
        return sequence_nll(logits, vocab.joint_to_speech(speech), mask)

    def step(self) -> float:
        texts, speech = self._sample_batch()
        loss = self._batch_loss(texts, speech)
        lr = self.config.learning_rate * min(1.0, (self._step + 1) / max(self.config.warmup_steps, 1))
        for group in self.opt.param_groups:
            group["lr"] = lr
        self.opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.opt.step()
        self._step += 1
        value = float(loss.detach())
        self.loss_history.append(value)
        return value

    def train(self, n_steps: int | None = None) -> None:
        for _ in range(n_steps if n_steps is not None else self.config.total_steps):
            self.step()


# ---------------------------------------------------------------------------
# Token interchange format


def save_tokens(path, rows: dict[str, np.ndarray]) -> None:
    """One line per utterance: utt_id then space-separated decimal ids."""
    with open(path, "w", encoding="utf-8") as fh:
        for utt_id, tokens in rows.items():
            fh.write(utt_id + " " + " ".join(str(int(t)) for t in tokens) + "\n")


def load_tokens(path) -> dict[str, np.ndarray]:
    rows = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                rows[parts[0]] = np.array([int(p) for p in parts[1:]], dtype=np.int64)
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: bad token line: {exc}") from exc
    return rows
