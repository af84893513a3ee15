"""Synthetic paired speech-text corpus: tone/chirp "language", mel features,
manifest persistence, and the matched-filter oracle that serves as ground-truth
ASR for evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, ManifestError

# Text vocabulary layout: id 0 = pad, id 1 = boundary, ids >= 2 map to
# acoustic templates.
PAD_ID = 0
BOUNDARY_ID = 1
FIRST_SYMBOL_ID = 2

_ARRAY_MAGIC = b"FMA1"
_DTYPE_F32 = 1


@dataclass
class MelConfig:
    """Log-mel feature extraction parameters.

    Defaults give a 100 Hz frame rate (hop 240 at 24 kHz) and 80 bins,
    with an affine normalization mapping log power to roughly [-1, 1].
    """

    sample_rate: int = 24000
    hop: int = 240
    window: int = 1024
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = 1e-9
    norm_offset: float = 2.5
    norm_scale: float = 0.15

    def __post_init__(self):
        if self.n_mels <= 0:
            raise ConfigError(f"n_mels must be positive, got {self.n_mels}")
        if self.hop <= 0 or self.window <= 0:
            raise ConfigError("hop and window must be positive")
        if self.fmax is None:
            self.fmax = self.sample_rate / 2

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    def normalize(self, mel_power: np.ndarray) -> np.ndarray:
        return self.norm_scale * (
            np.log10(np.maximum(mel_power, self.log_floor)) + self.norm_offset
        )

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return 10.0 ** (values / self.norm_scale - self.norm_offset)

    @property
    def silence_value(self) -> float:
        return float(self.norm_scale * (math.log10(self.log_floor) + self.norm_offset))


@dataclass
class MelSpectrogram:
    """T x d array of normalized log-mel features plus its extraction config."""

    data: np.ndarray
    config: MelConfig

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise InputError(f"mel data must be [T, d] with T >= 1, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise InputError("mel data contains non-finite values")

    @property
    def frames(self) -> int:
        return self.data.shape[0]


@dataclass
class TextSequence:
    ids: tuple[int, ...]
    vocab_size: int = 64

    def __post_init__(self):
        self.ids = tuple(int(i) for i in self.ids)
        if len(self.ids) < 1:
            raise InputError("text sequence must be non-empty")
        if any(i < 0 or i >= self.vocab_size for i in self.ids):
            raise InputError(f"text ids must lie in [0, {self.vocab_size})")


@dataclass
class TtsUtterance:
    utt_id: str
    text: TextSequence
    waveform: np.ndarray | None
    mel: MelSpectrogram
    duration_frames: int


@dataclass
class CorpusSpec:
    """Deterministic recipe for the synthetic corpus.

    Each text symbol maps to a fixed template lasting ``frames_per_symbol``
    mel frames: a pitched chirp in a low band plus a symbol-specific on/off
    amplitude code on a fixed high-band tone. The chirp moves with the
    per-utterance pitch offset (the "speaker identity" global factor) while
    the amplitude code stays put, so symbol identity and speaker offset are
    independently recoverable by matched filtering. Same spec + seed gives a
    byte-identical corpus.
    """

    n_utterances: int = 16
    vocab_size: int = 64
    symbols_min: int = 2
    symbols_max: int = 4
    seed: int = 0
    frames_per_symbol: int = 32
    freq_lo: float = 250.0
    freq_hi: float = 3000.0
    n_base_freqs: int = 8
    chirp_semitones: float = 2.0
    harmonic_level: float = 0.4
    amplitude: float = 0.5
    code_freqs: tuple[float, float] = (8500.0, 10750.0)
    code_level: float = 0.3
    offset_range: float = 3.0
    gain_wobble: float = 0.0  # log10-power depth of a smooth random gain curve
    mel: MelConfig = field(default_factory=MelConfig)
    fixed_symbols: tuple[tuple[int, ...], ...] | None = None
    fixed_offset: float | None = None

    def __post_init__(self):
        if self.n_utterances < 1:
            raise ConfigError("corpus needs at least one utterance")
        if self.vocab_size <= FIRST_SYMBOL_ID:
            raise ConfigError("vocab must hold at least one acoustic symbol")
        if not (1 <= self.symbols_min <= self.symbols_max):
            raise ConfigError("invalid symbols_per_utterance range")
        if self.frames_per_symbol < 1:
            raise ConfigError("frames_per_symbol must be >= 1")

    @property
    def n_symbols(self) -> int:
        return self.vocab_size - FIRST_SYMBOL_ID

    @property
    def n_code_cells(self) -> int:
        # enough on/off cells to give every symbol a distinct nonzero pattern
        return max(1, math.ceil(math.log2(self.n_symbols + 1)))

    def symbol_base_freq(self, symbol: int) -> float:
        """Chirp base frequency; cycles over a few widely spaced values.

        Spacing between neighbouring base frequencies stays well above the
        speaker-offset range so offset recovery is unambiguous.
        """
        i = symbol - FIRST_SYMBOL_ID
        if i < 0 or i >= self.n_symbols:
            raise InputError(f"symbol {symbol} outside acoustic range")
        n = min(self.n_base_freqs, self.n_symbols)
        if n == 1:
            return self.freq_lo
        frac = (i % n) / (n - 1)
        return self.freq_lo * (self.freq_hi / self.freq_lo) ** frac

    def symbol_code(self, symbol: int) -> tuple[int, ...]:
        """Per-symbol on/off amplitude pattern (never all-off)."""
        i = symbol - FIRST_SYMBOL_ID + 1
        return tuple((i >> b) & 1 for b in range(self.n_code_cells))


# ---------------------------------------------------------------------------
# Mel extraction


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(config: MelConfig) -> np.ndarray:
    """Triangular mel filterbank, peak amplitude 1, shape [n_mels, n_fft//2+1]."""
    pts = mel_to_hz(
        np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2)
    )
    freqs = np.fft.rfftfreq(config.window, 1.0 / config.sample_rate)
    bank = np.zeros((config.n_mels, freqs.shape[0]))
    for i in range(config.n_mels):
        lo, center, hi = pts[i], pts[i + 1], pts[i + 2]
        rising = (freqs - lo) / (center - lo)
        falling = (hi - freqs) / (hi - center)
        bank[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def filterbank_centers(config: MelConfig) -> np.ndarray:
    pts = mel_to_hz(
        np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2)
    )
    return pts[1:-1]


def _stft_power(waveform: np.ndarray, config: MelConfig) -> np.ndarray:
    """Power spectrogram with reflection padding; T = ceil(len / hop) frames.

    Accepts a single waveform [n] or a batch [b, n]."""
    win = config.window
    hop = config.hop
    waveform = np.asarray(waveform, dtype=np.float64)
    batched = waveform.ndim == 2
    if not batched:
        waveform = waveform[None, :]
    padded = np.pad(waveform, ((0, 0), (win // 2, win // 2)), mode="reflect")
    n_frames = int(math.ceil(waveform.shape[1] / hop))
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[:, idx] * np.hanning(win)[None, None, :]
    power = np.abs(np.fft.rfft(frames, axis=2)) ** 2
    return power if batched else power[0]


def mel_spectrogram(waveform: np.ndarray, config: MelConfig) -> MelSpectrogram:
    """Normalized log-mel features of a waveform.

    Raises InputError on empty or non-finite input.
    """
    waveform = np.asarray(waveform)
    if waveform.size == 0:
        raise InputError("cannot compute mel of an empty waveform")
    if not np.isfinite(waveform).any():
        raise InputError("waveform has no finite samples")
    power = _stft_power(waveform, config)
    mel_power = power @ mel_filterbank(config).T
    return MelSpectrogram(config.normalize(mel_power).astype(np.float32), config)


def pad_frames_to_multiple(data: np.ndarray, multiple: int) -> np.ndarray:
    """Round the frame count up to a multiple by repeating the final frame."""
    t = data.shape[0]
    target = int(math.ceil(t / multiple)) * multiple
    if target == t:
        return data
    tail = np.repeat(data[-1:], target - t, axis=0)
    return np.concatenate([data, tail], axis=0)


# ---------------------------------------------------------------------------
# Synthesis


def _synthesize_symbols(spec: CorpusSpec, symbols, offset_semitones: float) -> np.ndarray:
    """Templates for a batch of symbols at one speaker offset, shape [k, n].

    Each template is a Hann-enveloped exponential chirp (pitched, follows the
    speaker offset) plus fixed high tones gated by the symbol's on/off code.
    Chirp direction alternates with symbol parity so templates sharing a base
    frequency still differ in time structure; the code bits are split across
    two tones so every on/off cell stays longer than the analysis window even
    for short symbols.
    """
    sr = spec.mel.sample_rate
    n = spec.frames_per_symbol * spec.mel.hop
    symbols = np.asarray(symbols, dtype=np.int64)
    tau = (np.arange(n) / n)[None, :]
    direction = np.where((symbols - FIRST_SYMBOL_ID) % 2 == 0, 1.0, -1.0)[:, None]
    sweep = direction * spec.chirp_semitones * (tau - 0.5)
    f0 = np.array([spec.symbol_base_freq(int(s)) for s in symbols])[:, None]
    freq = f0 * 2.0 ** (offset_semitones / 12.0) * 2.0 ** (sweep / 12.0)
    phase = 2.0 * np.pi * np.cumsum(freq, axis=1) / sr
    env = np.hanning(n)[None, :]
    waves = spec.amplitude * env * (np.sin(phase) + spec.harmonic_level * np.sin(2.0 * phase))

    codes = np.array([spec.symbol_code(int(s)) for s in symbols])
    half = (codes.shape[1] + 1) // 2
    samples = np.arange(n)
    for tone_freq, bits in ((spec.code_freqs[0], codes[:, :half]), (spec.code_freqs[1], codes[:, half:])):
        n_cells = bits.shape[1]
        if n_cells == 0:
            continue
        cell = n // n_cells
        gate_bank = np.zeros((n_cells, n))
        for b in range(n_cells):
            start = b * cell
            stop = n if b == n_cells - 1 else (b + 1) * cell
            gate_bank[b, start:stop] = np.hanning(stop - start)
        gates = bits.astype(np.float64) @ gate_bank
        waves = waves + spec.code_level * gates * np.sin(2.0 * np.pi * tone_freq * samples / sr)
    return waves.astype(np.float32)


def synthesize_symbol(spec: CorpusSpec, symbol: int, offset_semitones: float) -> np.ndarray:
    return _synthesize_symbols(spec, [symbol], offset_semitones)[0]


def synthesize_utterance(
    spec: CorpusSpec, symbols: tuple[int, ...], offset_semitones: float
) -> np.ndarray:
    return np.concatenate(
        [synthesize_symbol(spec, s, offset_semitones) for s in symbols]
    )


def _utterance_rng(spec: CorpusSpec, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, index])


def _draw_symbols_and_offset(spec: CorpusSpec, index: int, rng: np.random.Generator):
    if spec.fixed_symbols is not None:
        symbols = tuple(spec.fixed_symbols[index % len(spec.fixed_symbols)])
    else:
        n_sym = int(rng.integers(spec.symbols_min, spec.symbols_max + 1))
        symbols = tuple(
            int(s) for s in rng.integers(FIRST_SYMBOL_ID, spec.vocab_size, size=n_sym)
        )
    if spec.fixed_offset is not None:
        offset = float(spec.fixed_offset)
    else:
        offset = float(rng.uniform(-spec.offset_range, spec.offset_range))
    return symbols, offset


def _gain_envelope(spec: CorpusSpec, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random per-utterance gain curve (amplitude domain).

    Carries information no token or text symbol determines, so the corpus
    conditionals keep genuine uncertainty instead of collapsing to deltas."""
    tau = np.arange(n_samples) / spec.mel.sample_rate
    amps = rng.uniform(0.3, 1.0, size=3)
    freqs = rng.uniform(0.5, 2.5, size=3)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    curve = sum(a * np.sin(2 * np.pi * f * tau + p) for a, f, p in zip(amps, freqs, phases))
    log10_gain = spec.gain_wobble * curve / amps.sum()
    return 10.0 ** (log10_gain / 2.0)


def generate_corpus(spec: CorpusSpec) -> list[TtsUtterance]:
    """Deterministic corpus: pure function of (spec, seed). Each utterance
    consumes its own seeded stream, so generation parallelizes per utterance."""
    utterances = []
    for i in range(spec.n_utterances):
        rng = _utterance_rng(spec, i)
        symbols, offset = _draw_symbols_and_offset(spec, i, rng)
        wave = synthesize_utterance(spec, symbols, offset)
        if spec.gain_wobble > 0:
            wave = (wave * _gain_envelope(spec, wave.shape[0], rng)).astype(np.float32)
        mel = mel_spectrogram(wave, spec.mel)
        utterances.append(
            TtsUtterance(
                utt_id=f"utt{i:04d}",
                text=TextSequence(symbols, vocab_size=spec.vocab_size),
                waveform=wave,
                mel=mel,
                duration_frames=mel.frames,
            )
        )
    return utterances


# ---------------------------------------------------------------------------
# Matched-filter oracle ("ASR" plus speaker-offset recovery)


class TemplateMatcher:
    """Decodes symbol sequences and pitch offsets from mel spectrograms by
    cosine similarity against the template bank.

    This is the exact oracle that stands in for ASR and speaker similarity:
    on clean corpus mels it recovers the text with 100% accuracy.
    """

    def __init__(self, spec: CorpusSpec, offset_grid_step: float = 0.125):
        self.spec = spec
        if spec.fixed_offset is not None and spec.offset_range == 0.0:
            self.offsets = np.array([spec.fixed_offset])
        else:
            r = spec.offset_range + offset_grid_step
            self.offsets = np.arange(-r, r + 1e-9, offset_grid_step)
        self._bank = {}  # offset index -> [n_symbols, fps * d]

    def _templates(self, offset_idx: int) -> np.ndarray:
        if offset_idx not in self._bank:
            offset = self.offsets[offset_idx]
            waves = _synthesize_symbols(
                self.spec, range(FIRST_SYMBOL_ID, self.spec.vocab_size), offset
            )
            power = _stft_power(waves, self.spec.mel)
            mel = self.spec.mel.normalize(power @ mel_filterbank(self.spec.mel).T)
            k = mel.shape[0]
            self._bank[offset_idx] = (
                mel.reshape(k, -1).astype(np.float32) - self.spec.mel.silence_value
            )
        return self._bank[offset_idx]

    def _slot_scores(self, mel_data: np.ndarray, offset_idx: int) -> np.ndarray:
        fps = self.spec.frames_per_symbol
        n_slots = mel_data.shape[0] // fps
        slots = mel_data[: n_slots * fps].reshape(n_slots, -1) - self.spec.mel.silence_value
        bank = self._templates(offset_idx)
        num = slots @ bank.T
        denom = np.linalg.norm(slots, axis=1, keepdims=True) * np.linalg.norm(bank, axis=1)[None, :]
        return num / np.maximum(denom, 1e-12)

    def decode(self, mel: MelSpectrogram | np.ndarray, duration_frames: int | None = None):
        """Returns (symbol ids, recovered offset in semitones)."""
        data = mel.data if isinstance(mel, MelSpectrogram) else np.asarray(mel)
        if duration_frames is not None:
            data = data[:duration_frames]
        best = None
        for oi in range(len(self.offsets)):
            scores = self._slot_scores(data, oi)
            total = float(scores.max(axis=1).sum())
            if best is None or total > best[0]:
                best = (total, oi, scores)
        _, oi, scores = best
        symbols = tuple(int(s) + FIRST_SYMBOL_ID for s in scores.argmax(axis=1))
        return symbols, float(self.offsets[oi])


# ---------------------------------------------------------------------------
# Manifest persistence


def _write_array(path: Path, data: np.ndarray) -> None:
    data = np.ascontiguousarray(data, dtype="<f4")
    t, d = data.shape
    header = _ARRAY_MAGIC + np.array([_DTYPE_F32, t, d], dtype="<u4").tobytes()
    path.write_bytes(header + data.tobytes())


def _read_array(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != _ARRAY_MAGIC:
        raise ManifestError(f"{path}: not a valid array file")
    dtype_code, t, d = np.frombuffer(raw[4:16], dtype="<u4")
    if dtype_code != _DTYPE_F32:
        raise ManifestError(f"{path}: unsupported dtype code {dtype_code}")
    expected = 16 + 4 * t * d
    if len(raw) != expected:
        raise ManifestError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw[16:], dtype="<f4").reshape(t, d).copy()


def write_mel_array(path: str | Path, data: np.ndarray) -> None:
    """Standalone [T, d] float32 array file (magic, dtype code, T, d header)."""
    _write_array(Path(path), data)


def read_mel_array(path: str | Path) -> np.ndarray:
    return _read_array(Path(path))


def save_manifest(utterances: list[TtsUtterance], path: str | Path) -> None:
    """JSON-lines index plus one binary mel array file per utterance."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array_dir = path.parent / "arrays"
    array_dir.mkdir(exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for utt in utterances:
            rel = f"arrays/{utt.utt_id}.mel"
            _write_array(path.parent / rel, utt.mel.data)
            record = {
                "utt_id": utt.utt_id,
                "text_ids": list(utt.text.ids),
                "vocab_size": utt.text.vocab_size,
                "mel_path": rel,
                "duration_frames": utt.duration_frames,
                "mel_config": asdict(utt.mel.config),
            }
            fh.write(json.dumps(record) + "\n")


def load_manifest(path: str | Path) -> list[TtsUtterance]:
    """Inverse of save_manifest; bit-exact for ids, text, and mel data.

    Waveforms are not persisted and come back as None. Raises ManifestError
    with a line number on malformed input, without returning a partial corpus.
    """
    path = Path(path)
    utterances = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                utt_id = record["utt_id"]
                text = TextSequence(record["text_ids"], vocab_size=record["vocab_size"])
                mel_config = MelConfig(**record["mel_config"])
                rel = record["mel_path"]
                duration = int(record["duration_frames"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed manifest record: {exc}") from exc
            mel_path = path.parent / rel
            if not mel_path.exists():
                raise ManifestError(f"{path}:{lineno}: missing array file {rel}")
            mel = MelSpectrogram(_read_array(mel_path), mel_config)
            utterances.append(
                TtsUtterance(
                    utt_id=utt_id,
                    text=text,
                    waveform=None,
                    mel=mel,
                    duration_frames=duration,
                )
            )
    return utterances


# ---------------------------------------------------------------------------
# Griffin-Lim inversion (optional utility; mel stays the terminal format)


def _istft(spectrum: np.ndarray, config: MelConfig, n_samples: int) -> np.ndarray:
    win = config.window
    hop = config.hop
    window = np.hanning(win)
    frames = np.fft.irfft(spectrum, n=win, axis=1) * window[None, :]
    total = n_samples + 2 * (win // 2)
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(frames.shape[0]):
        start = t * hop
        out[start : start + win] += frames[t]
        norm[start : start + win] += window**2
    out = out / np.maximum(norm, 1e-8)
    return out[win // 2 : win // 2 + n_samples]


def spectral_convergence(reference: np.ndarray, estimate: np.ndarray) -> float:
    return float(
        np.linalg.norm(reference - estimate) / max(np.linalg.norm(reference), 1e-12)
    )


def griffin_lim(mel: MelSpectrogram, iters: int = 32, seed: int = 0) -> np.ndarray:
    """Approximate waveform inversion via filterbank pseudo-inverse plus
    iterative phase refinement."""
    if iters < 0:
        raise InputError("iters must be >= 0")
    config = mel.config
    bank = mel_filterbank(config)
    mel_power = config.denormalize(mel.data.astype(np.float64))
    linear_power = np.clip(mel_power @ np.linalg.pinv(bank).T, 0.0, None)
    magnitude = np.sqrt(linear_power)
    n_samples = mel.frames * config.hop
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(magnitude.shape))
    wave = _istft(magnitude * phase, config, n_samples)
    for _ in range(iters):
        spectrum = np.fft.rfft(
            np.stack(
                [
                    np.pad(wave, config.window // 2, mode="reflect")[
                        t * config.hop : t * config.hop + config.window
                    ]
                    * np.hanning(config.window)
                    for t in range(mel.frames)
                ]
            ),
            axis=1,
        )
        phase = spectrum / np.maximum(np.abs(spectrum), 1e-12)
        wave = _istft(magnitude * phase, config, n_samples)
    return wave.astype(np.float32)
