"""Evaluation and verification harness: exact rate accounting, reconstruction
metrics against the matched-filter oracle, finite-difference gradient checks,
and the ablation runner.
"""

from __future__ import annotations

import binascii
import csv
import io
import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from .codec import Codec, CodecConfig, Trainer, continue_train_decoder
from .corpus import CorpusSpec, TemplateMatcher, TtsUtterance, generate_corpus
from .errors import ConfigError, InputError
from .flow import SamplerConfig


# ---------------------------------------------------------------------------
# Rate accounting (exact rational arithmetic)


@dataclass(frozen=True)
class RateReport:
    frame_rate: Fraction
    tokens_per_frame: int
    bits_per_token: int

    @property
    def token_rate(self) -> Fraction:
        return self.frame_rate * self.tokens_per_frame

    @property
    def bitrate_kbps(self) -> Fraction:
        return self.token_rate * self.bits_per_token / 1000

    def formatted(self) -> dict[str, str]:
        return {
            "frame_rate_hz": format_fraction(self.frame_rate),
            "token_rate_hz": format_fraction(self.token_rate),
            "bits_per_token": str(self.bits_per_token),
            "bitrate_kbps": format_fraction(self.bitrate_kbps),
        }


def format_fraction(x: Fraction) -> str:
    """Exact decimal string for terminating fractions, 'p/q' otherwise."""
    x = Fraction(x)
    denom = x.denominator
    twos = fives = 0
    while denom % 2 == 0:
        denom //= 2
        twos += 1
    while denom % 5 == 0:
        denom //= 5
        fives += 1
    if denom != 1:
        return f"{x.numerator}/{x.denominator}"
    shift = max(twos, fives)
    scaled = x.numerator * 10**shift // x.denominator
    if shift == 0:
        return str(scaled)
    sign = "-" if scaled < 0 else ""
    digits = str(abs(scaled)).rjust(shift + 1, "0")
    whole, frac = digits[:-shift], digits[-shift:]
    frac = frac.rstrip("0")
    return f"{sign}{whole}.{frac}" if frac else f"{sign}{whole}"


def rate_report(config: CodecConfig) -> RateReport:
    """Token stream rates for a codec configuration, without float rounding."""
    frame_rate = Fraction(config.mel.sample_rate, config.mel.hop * config.quantizer.downsample_factor)
    return RateReport(
        frame_rate=frame_rate,
        tokens_per_frame=1,
        bits_per_token=config.quantizer.latent_dim,
    )


def rate_report_from_values(
    frame_rate: Fraction | str | float,
    bits_per_token: int,
    tokens_per_frame: int = 1,
) -> RateReport:
    if isinstance(frame_rate, float):
        frame_rate = Fraction(str(frame_rate))
    else:
        frame_rate = Fraction(frame_rate)
    return RateReport(frame_rate, tokens_per_frame, bits_per_token)


# ---------------------------------------------------------------------------
# Reconstruction evaluation


@dataclass
class ReconReport:
    """Proxy metrics: normalized MSE for quality, template-decode accuracy for
    intelligibility, speaker-offset recovery error for similarity."""

    utt_ids: list[str] = field(default_factory=list)
    mse: list[float] = field(default_factory=list)
    norm_mse: list[float] = field(default_factory=list)
    symbol_correct: int = 0
    symbol_total: int = 0
    offset_errors: list[float] = field(default_factory=list)

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.mse)) if self.mse else float("nan")

    @property
    def mean_norm_mse(self) -> float:
        return float(np.mean(self.norm_mse)) if self.norm_mse else float("nan")

    @property
    def accuracy(self) -> float:
        return self.symbol_correct / self.symbol_total if self.symbol_total else float("nan")

    @property
    def mean_offset_error(self) -> float:
        return float(np.mean(self.offset_errors)) if self.offset_errors else float("nan")

    def summary(self) -> dict:
        return {
            "n_utterances": len(self.utt_ids),
            "mean_mse": self.mean_mse,
            "mean_norm_mse": self.mean_norm_mse,
            "template_accuracy": self.accuracy,
            "mean_offset_error": self.mean_offset_error,
        }


def true_offsets(spec: CorpusSpec) -> dict[str, float]:
    """Speaker offsets a corpus spec draws, replayed without synthesis."""
    return {
        f"utt{i:04d}": off for i, off in enumerate(_offsets_from_spec(spec))
    }


def _offsets_from_spec(spec: CorpusSpec) -> list[float]:
    from .corpus import _draw_symbols_and_offset, _utterance_rng

    offsets = []
    for i in range(spec.n_utterances):
        _, offset = _draw_symbols_and_offset(spec, i, _utterance_rng(spec, i))
        offsets.append(offset)
    return offsets


def evaluate_reconstruction(
    codec: Codec,
    corpus: list[TtsUtterance],
    spec: CorpusSpec,
    sampler: SamplerConfig,
    seed: int = 0,
    prompt_fraction: float = 0.0,
    matcher: TemplateMatcher | None = None,
    offsets: dict[str, float] | None = None,
) -> ReconReport:
    """decode(encode(x)) per utterance, scored against the oracle.

    With a nonzero prompt_fraction the clean prefix is supplied at decode time
    and the error metrics cover only the frames past the prompt, so prompted
    and unprompted runs are compared on the same frame set.
    """
    matcher = matcher or TemplateMatcher(spec)
    if offsets is None:
        offsets = true_offsets(spec) if spec.fixed_offset is None else {}
    report = ReconReport()
    for utt in corpus:
        tokens = codec.encode(utt.mel)
        prompt_len = int(prompt_fraction * utt.duration_frames)
        prompt = utt.mel.data[:prompt_len] if prompt_len > 0 else None
        rng = torch.Generator().manual_seed(seed + binascii.crc32(utt.utt_id.encode()))
        recon = codec.decode(tokens, utt.text, sampler, rng, prompt_mel=prompt)
        target = utt.mel.data
        out = recon.data[: utt.duration_frames]
        tail_target = target[prompt_len : utt.duration_frames]
        tail_out = out[prompt_len:]
        mse = float(np.mean((tail_out - tail_target) ** 2))
        variance = float(np.var(tail_target))
        report.utt_ids.append(utt.utt_id)
        report.mse.append(mse)
        report.norm_mse.append(mse / max(variance, 1e-12))
        symbols, rec_offset = matcher.decode(out, utt.duration_frames)
        report.symbol_correct += sum(a == b for a, b in zip(symbols, utt.text.ids))
        report.symbol_total += len(utt.text.ids)
        if utt.utt_id in offsets:
            report.offset_errors.append(abs(rec_offset - offsets[utt.utt_id]))
        elif spec.fixed_offset is not None:
            report.offset_errors.append(abs(rec_offset - spec.fixed_offset))
    return report


# ---------------------------------------------------------------------------
# Finite-difference gradient oracle


@dataclass
class GradcheckProbe:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradcheckReport:
    probes: list[GradcheckProbe]
    n_redrawn: int

    @property
    def max_rel_err(self) -> float:
        return max((p.rel_err for p in self.probes), default=0.0)


def gradcheck(
    loss_fn,
    params: dict[str, torch.Tensor],
    n_probes: int = 24,
    h: float = 1e-5,
    seed: int = 0,
    signs_fn=None,
    grad_floor: float = 1e-6,
    max_redraws: int = 200,
) -> GradcheckReport:
    """Central finite differences on randomly selected parameter entries.

    Requires 64-bit parameters. When signs_fn is given (returning the
    quantizer sign pattern for the current parameters), probes whose +/-h
    evaluations land on different sign patterns are redrawn: the
    straight-through estimator is intentionally non-differentiable there.
    grad_floor bounds the relative-error denominator from below; gradients
    under it sit at the finite-difference noise floor for O(1) losses.
    """
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise ConfigError(f"gradcheck needs float64 parameters, {name} is {p.dtype}")
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise InputError("loss is non-finite; aborting gradient check")
    for p in params.values():
        if p.grad is not None:
            p.grad = None
    loss.backward()
    grads = {name: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for name, p in params.items()}

    rng = np.random.default_rng(seed)
    names = sorted(params)
    probes: list[GradcheckProbe] = []
    redrawn = 0
    attempts = 0
    while len(probes) < n_probes and attempts < n_probes + max_redraws:
        attempts += 1
        name = names[rng.integers(len(names))]
        p = params[name]
        flat_index = int(rng.integers(p.numel()))
        index = np.unravel_index(flat_index, p.shape) if p.ndim else ()
        step = h * max(1.0, abs(float(p.detach().reshape(-1)[flat_index])))

        def eval_at(delta: float):
            with torch.no_grad():
                p.reshape(-1)[flat_index] += delta
            try:
                with torch.no_grad():
                    value = float(loss_fn())
                signs = signs_fn() if signs_fn is not None else None
            finally:
                with torch.no_grad():
                    p.reshape(-1)[flat_index] -= delta
            return value, signs

        plus, signs_plus = eval_at(step)
        minus, signs_minus = eval_at(-step)
        if signs_fn is not None and not np.array_equal(signs_plus, signs_minus):
            redrawn += 1
            continue
        numeric = (plus - minus) / (2.0 * step)
        analytic = float(grads[name].reshape(-1)[flat_index])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), grad_floor)
        probes.append(GradcheckProbe(name, tuple(int(i) for i in index), analytic, numeric, rel))
    if len(probes) < n_probes:
        raise InputError(
            f"could only complete {len(probes)}/{n_probes} probes "
            f"({redrawn} redrawn at sign boundaries)"
        )
    return GradcheckReport(probes=probes, n_redrawn=redrawn)


# ---------------------------------------------------------------------------
# Ablation runner


ABLATION_AXES = (
    "quantizer_variant",
    "prompt_on_off",
    "frame_rate",
    "inference_steps",
    "decoder_continued_training",
)


@dataclass
class AblationSpec:
    axis: str
    values: tuple = ()

    def __post_init__(self):
        if self.axis not in ABLATION_AXES:
            raise ConfigError(f"unknown ablation axis {self.axis!r}; choose from {ABLATION_AXES}")
        if not self.values:
            self.values = {
                "quantizer_variant": ("bsq", "vq"),
                "prompt_on_off": ("on", "off"),
                "frame_rate": ("6.25", "12.5"),
                "inference_steps": (50, 10, 5),
                "decoder_continued_training": ("off", "on"),
            }[self.axis]


def apply_variant(base: CodecConfig, axis: str, value) -> CodecConfig:
    """CodecConfig delta for one ablation value."""
    config = CodecConfig.from_dict(base.to_dict())
    if axis == "quantizer_variant":
        config.quantizer = replace(config.quantizer, variant=str(value))
    elif axis == "prompt_on_off":
        config.prompt_enabled = value in ("on", True)
    elif axis == "frame_rate":
        target = Fraction(str(value))
        factor = Fraction(config.mel.sample_rate, config.mel.hop) / target
        if factor.denominator != 1 or factor < 1:
            raise ConfigError(f"frame rate {value} is not an integer downsample of the mel rate")
        config.quantizer = replace(config.quantizer, downsample_factor=int(factor))
    elif axis in ("inference_steps", "decoder_continued_training"):
        pass  # handled at evaluation time; the config itself is unchanged
    return config


@dataclass
class AblationRow:
    variant: str
    status: str
    metrics: dict

    def flat(self) -> dict:
        out = {"variant": self.variant, "status": self.status}
        out.update(self.metrics)
        return out


@dataclass
class AblationTable:
    axis: str
    rows: list[AblationRow]

    _COLUMNS = ("variant", "status", "bitrate_kbps", "norm_mse", "template_accuracy", "offset_error")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self._COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in self.rows:
            writer.writerow(row.flat())
        return buf.getvalue()

    def to_text(self) -> str:
        cells = [self._COLUMNS]
        for row in self.rows:
            flat = row.flat()
            cells.append(tuple(str(flat.get(c, "")) for c in self._COLUMNS))
        widths = [max(len(r[i]) for r in cells) for i in range(len(self._COLUMNS))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


def _metric_str(x: float) -> str:
    return f"{x:.6f}"


def run_ablation(
    spec: AblationSpec,
    base_config: CodecConfig,
    corpus_spec: CorpusSpec,
    steps: int | None = None,
    eval_sampler: SamplerConfig | None = None,
    eval_seed: int = 0,
    continued_steps: int = 500,
    out_dir: str | Path | None = None,
) -> AblationTable:
    """Train/evaluate every variant of one ablation axis under a shared seed.

    A variant that fails to train is marked failed and the run continues.
    Inference-step and continued-training axes reuse a single base training.
    """
    eval_sampler = eval_sampler or SamplerConfig(32)
    rows = []
    shared_model: Codec | None = None

    for value in spec.values:
        variant = f"{spec.axis}={value}"
        try:
            config = apply_variant(base_config, spec.axis, value)
            corpus = generate_corpus(corpus_spec)
            if spec.axis in ("inference_steps", "decoder_continued_training"):
                if shared_model is None:
                    trainer = Trainer(config, corpus)
                    trainer.train(steps)
                    shared_model = trainer.codec
                model = shared_model
                if spec.axis == "decoder_continued_training" and value in ("on", True):
                    model = Codec(config)
                    model.load_state_dict(shared_model.state_dict())
                    continue_train_decoder(model, corpus, continued_steps)
                sampler = (
                    SamplerConfig(int(value)) if spec.axis == "inference_steps" else eval_sampler
                )
            else:
                trainer = Trainer(config, corpus)
                trainer.train(steps)
                model = trainer.codec
                sampler = eval_sampler
            prompt_fraction = 0.25 if config.prompt_enabled else 0.0
            report = evaluate_reconstruction(
                model, corpus, corpus_spec, sampler, seed=eval_seed, prompt_fraction=prompt_fraction
            )
            rates = rate_report(config)
            rows.append(
                AblationRow(
                    variant=variant,
                    status="ok",
                    metrics={
                        "bitrate_kbps": format_fraction(rates.bitrate_kbps),
                        "norm_mse": _metric_str(report.mean_norm_mse),
                        "template_accuracy": _metric_str(report.accuracy),
                        "offset_error": _metric_str(report.mean_offset_error),
                    },
                )
            )
        except Exception as exc:  # noqa: BLE001 - a failed variant must not stop the run
            rows.append(AblationRow(variant=variant, status=f"failed: {exc}", metrics={}))

    table = AblationTable(axis=spec.axis, rows=rows)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"ablation_{spec.axis}.csv").write_text(table.to_csv())
        (out_dir / f"ablation_{spec.axis}.txt").write_text(table.to_text() + "\n")
    return table


def write_report(path: str | Path, report: ReconReport) -> None:
    Path(path).write_text(json.dumps(report.summary(), indent=2) + "\n")
