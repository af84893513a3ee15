import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowtok.corpus import (
    CorpusSpec,
    MelConfig,
    MelSpectrogram,
    TemplateMatcher,
    TextSequence,
    filterbank_centers,
    generate_corpus,
    griffin_lim,
    load_manifest,
    mel_filterbank,
    mel_spectrogram,
    pad_frames_to_multiple,
    save_manifest,
    synthesize_utterance,
)
from flowtok.errors import ConfigError, InputError, ManifestError


def tone(freq, seconds=1.0, sr=24000, amp=0.5):
    t = np.arange(int(seconds * sr)) / sr
    return (amp * np.sin(2 * np.pi * freq * t)).astype(np.float32)


class TestMelSpectrogram:
    def test_one_second_is_100_frames(self):
        mel = mel_spectrogram(tone(440), MelConfig())
        assert mel.frames == 100

    def test_frame_count_is_ceil_of_length_over_hop(self):
        config = MelConfig()
        for n in (1, 239, 240, 241, 5000, 24000):
            mel = mel_spectrogram(np.random.default_rng(0).normal(0, 0.1, n).astype(np.float32), config)
            assert mel.frames == math.ceil(n / config.hop)

    def test_silence_maps_to_the_floor_constant(self):
        config = MelConfig()
        mel = mel_spectrogram(np.zeros(4800, dtype=np.float32), config)
        assert np.allclose(mel.data, config.silence_value, atol=1e-6)

    def test_tone_peaks_in_the_bracketing_mel_bin(self):
        # independent oracle: triangle responses computed from the center
        # frequencies directly
        config = MelConfig()
        centers = filterbank_centers(config)
        edges = np.concatenate([[config.fmin], centers, [config.fmax]])
        f = 440.0
        response = np.zeros(config.n_mels)
        for i in range(config.n_mels):
            lo, c, hi = edges[i], edges[i + 1], edges[i + 2]
            response[i] = max(0.0, min((f - lo) / (c - lo), (hi - f) / (hi - c)))
        expected_bin = int(response.argmax())

        mel = mel_spectrogram(tone(f), config)
        observed = np.bincount(mel.data.argmax(axis=1), minlength=config.n_mels).argmax()
        assert observed == expected_bin

    def test_normalization_roundtrip_is_affine_invertible(self):
        config = MelConfig()
        mel = mel_spectrogram(tone(440), config)
        power = config.denormalize(mel.data)
        assert np.allclose(config.normalize(power), mel.data, atol=1e-5)

    def test_rejects_empty_and_nonfinite(self):
        with pytest.raises(InputError):
            mel_spectrogram(np.array([]), MelConfig())
        with pytest.raises(InputError):
            mel_spectrogram(np.full(100, np.nan), MelConfig())

    def test_filterbank_shape_and_peaks(self):
        config = MelConfig()
        bank = mel_filterbank(config)
        assert bank.shape == (config.n_mels, config.window // 2 + 1)
        assert np.all(bank.max(axis=1) > 0)


class TestCorpusGeneration:
    def test_fixed_symbols_give_expected_frames(self):
        spec = CorpusSpec(n_utterances=1, fixed_symbols=((3, 7),), fixed_offset=0.0)
        utt = generate_corpus(spec)[0]
        assert utt.text.ids == (3, 7)
        assert utt.duration_frames == 2 * 32  # 32 frames per symbol by default
        assert utt.waveform.shape[0] == 2 * 32 * spec.mel.hop

    def test_seeded_determinism_is_bit_exact(self):
        spec = CorpusSpec(n_utterances=4, seed=9, frames_per_symbol=16)
        a = generate_corpus(spec)
        b = generate_corpus(spec)
        for ua, ub in zip(a, b):
            assert (ua.waveform == ub.waveform).all()
            assert (ua.mel.data == ub.mel.data).all()

    def test_different_seeds_differ_but_share_schema(self):
        a = generate_corpus(CorpusSpec(n_utterances=4, seed=1, frames_per_symbol=16))
        b = generate_corpus(CorpusSpec(n_utterances=4, seed=2, frames_per_symbol=16))
        assert any(
            ua.text.ids != ub.text.ids or not np.array_equal(ua.waveform, ub.waveform)
            for ua, ub in zip(a, b)
        )
        for ua, ub in zip(a, b):
            assert ua.utt_id == ub.utt_id
            assert ua.mel.data.shape[1] == ub.mel.data.shape[1]

    def test_invalid_specs_rejected(self):
        with pytest.raises(ConfigError):
            CorpusSpec(n_utterances=0)
        with pytest.raises(ConfigError):
            CorpusSpec(vocab_size=2)
        with pytest.raises(ConfigError):
            CorpusSpec(symbols_min=3, symbols_max=2)

    def test_mel_framing_independent_of_content(self):
        spec = CorpusSpec(n_utterances=1, fixed_symbols=((5, 5, 5),), fixed_offset=0.0)
        loud = synthesize_utterance(spec, (5, 5, 5), 0.0)
        quiet = np.zeros_like(loud)
        assert mel_spectrogram(loud, spec.mel).frames == mel_spectrogram(quiet, spec.mel).frames

    def test_pad_frames_repeats_final_frame(self):
        data = np.arange(10, dtype=np.float32).reshape(5, 2)
        padded = pad_frames_to_multiple(data, 4)
        assert padded.shape == (8, 2)
        assert (padded[5:] == data[-1]).all()
        assert pad_frames_to_multiple(padded, 4) is padded


class TestTemplateOracle:
    def test_oracle_recovers_all_text_ids(self, small_spec, small_corpus):
        matcher = TemplateMatcher(small_spec)
        for utt in small_corpus:
            symbols, _ = matcher.decode(utt.mel, utt.duration_frames)
            assert symbols == utt.text.ids

    def test_oracle_recovers_offset_within_grid(self):
        spec = CorpusSpec(
            n_utterances=1, fixed_symbols=((10, 30, 50),), fixed_offset=-2.3, frames_per_symbol=16
        )
        utt = generate_corpus(spec)[0]
        matcher = TemplateMatcher(CorpusSpec(n_utterances=1, frames_per_symbol=16))
        symbols, offset = matcher.decode(utt.mel, utt.duration_frames)
        assert symbols == utt.text.ids
        assert abs(offset - (-2.3)) <= 0.125


class TestManifest:
    def test_roundtrip_bit_exact(self, small_corpus, tmp_path):
        path = tmp_path / "manifest.jsonl"
        save_manifest(small_corpus, path)
        loaded = load_manifest(path)
        assert len(loaded) == len(small_corpus)
        for a, b in zip(small_corpus, loaded):
            assert a.utt_id == b.utt_id
            assert a.text.ids == b.text.ids
            assert (a.mel.data == b.mel.data).all()
            assert a.duration_frames == b.duration_frames

    def test_truncated_manifest_raises_with_line_number(self, small_corpus, tmp_path):
        path = tmp_path / "manifest.jsonl"
        save_manifest(small_corpus, path)
        lines = path.read_text().splitlines()
        lines[2] = lines[2][: len(lines[2]) // 2]
        path.write_text("\n".join(lines))
        with pytest.raises(ManifestError, match=":3"):
            load_manifest(path)

    def test_missing_array_file_raises_descriptive_error(self, small_corpus, tmp_path):
        path = tmp_path / "manifest.jsonl"
        save_manifest(small_corpus, path)
        victim = next((tmp_path / "arrays").iterdir())
        victim.unlink()
        with pytest.raises(ManifestError, match="missing array file"):
            load_manifest(path)


class TestGriffinLim:
    def test_silence_inverts_to_near_silence(self):
        config = MelConfig()
        silence = mel_spectrogram(np.zeros(4800, dtype=np.float32), config)
        wave = griffin_lim(silence, iters=8)
        tone_rms = float(np.sqrt(np.mean(tone(440) ** 2)))
        assert float(np.sqrt(np.mean(wave**2))) < 1e-3 * tone_rms

    def test_more_iterations_reduce_spectral_distance(self):
        config = MelConfig()
        mel = mel_spectrogram(tone(440, seconds=0.5), config)

        def mel_distance(wave):
            back = mel_spectrogram(wave, config)
            return float(np.mean((back.data - mel.data) ** 2))

        d4 = mel_distance(griffin_lim(mel, iters=4))
        d32 = mel_distance(griffin_lim(mel, iters=32))
        assert d32 < d4

    def test_roundtrip_tone_keeps_fft_peak_within_one_analysis_bin(self):
        # one bin at the analysis resolution (sr / window); the mel
        # representation cannot localize frequency any finer than that
        config = MelConfig()
        mel = mel_spectrogram(tone(440, seconds=0.5), config)
        wave = griffin_lim(mel, iters=16)
        spectrum = np.abs(np.fft.rfft(wave))
        freqs = np.fft.rfftfreq(len(wave), 1.0 / config.sample_rate)
        peak = freqs[spectrum.argmax()]
        assert abs(peak - 440.0) <= config.sample_rate / config.window


class TestTextSequence:
    def test_rejects_out_of_range_ids(self):
        with pytest.raises(InputError):
            TextSequence((70,), vocab_size=64)
        with pytest.raises(InputError):
            TextSequence((), vocab_size=64)

    @given(st.lists(st.integers(0, 63), min_size=1, max_size=10))
    def test_accepts_any_in_range_sequence(self, ids):
        assert TextSequence(tuple(ids)).ids == tuple(ids)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 2000), hop=st.sampled_from([120, 240, 480]))
def test_frame_arithmetic_property(n, hop):
    config = MelConfig(hop=hop)
    wave = np.random.default_rng(n).normal(0, 0.1, n).astype(np.float32)
    assert mel_spectrogram(wave, config).frames == math.ceil(n / hop)
