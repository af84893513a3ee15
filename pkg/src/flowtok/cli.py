"""Command-line entry point exposing every pipeline stage.

Exit codes: 0 success, 1 usage error, 2 runtime failure. All randomness is
controlled by --seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import codec as codec_mod
from . import corpus as corpus_mod
from . import harness, lm
from .codec import CodecConfig, Trainer, load_checkpoint, preset, save_checkpoint
from .corpus import (CorpusSpec, MelSpectrogram, TemplateMatcher, generate_corpus,
                     load_manifest, save_manifest, write_mel_array)
from .flow import SAMPLER_PRESETS, SamplerConfig
from .lm import LmConfig, LmTrainer, LmVocab, ar_generate, mgm_decode
from .nn_core import BlockConfig


def _sampler(name: str) -> SamplerConfig:
    if name in SAMPLER_PRESETS:
        return SAMPLER_PRESETS[name]
    return SamplerConfig(int(name))


def _load_config(args) -> CodecConfig:
    config = preset(args.preset)
    if getattr(args, "config", None):
        overrides = json.loads(Path(args.config).read_text())
        merged = config.to_dict()
        _deep_update(merged, overrides)
        config = CodecConfig.from_dict(merged)
    return config


def _deep_update(base: dict, overrides: dict) -> None:
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value


def _corpus_spec(args) -> CorpusSpec:
    return CorpusSpec(
        n_utterances=args.n,
        symbols_min=args.symbols_min,
        symbols_max=args.symbols_max,
        seed=args.seed,
        frames_per_symbol=args.frames_per_symbol,
        offset_range=args.offset_range,
    )


def _load_corpus(corpus_dir: str):
    return load_manifest(Path(corpus_dir) / "manifest.jsonl")


def _load_codec_model(path: str):
    return codec_mod.load_codec(path)


def _load_lm(path: str):
    ckpt = load_checkpoint(path)
    config = LmConfig.from_dict(ckpt.config)
    model = lm.ArModel(config) if config.kind == "ar" else lm.MgmModel(config)
    model.load_state_dict(
        {k: torch.as_tensor(v) for k, v in ckpt.arrays.items() if not k.startswith("_")}
    )
    return model, config


def cmd_gen_data(args) -> int:
    spec = _corpus_spec(args)
    utterances = generate_corpus(spec)
    out = Path(args.corpus_dir)
    save_manifest(utterances, out / "manifest.jsonl")
    (out / "corpus_spec.json").write_text(json.dumps(spec.__dict__, default=_json_default, indent=2))
    print(f"wrote {len(utterances)} utterances to {out}")
    return 0


def _json_default(obj):
    if hasattr(obj, "__dict__"):
        return obj.__dict__
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj)}")


def cmd_train(args) -> int:
    config = _load_config(args)
    config.trainer = replace(config.trainer, seed=args.seed)
    corpus = _load_corpus(args.corpus_dir)
    trainer = Trainer(config, corpus)
    trainer.diagnostic_path = Path(args.out).with_suffix(".diverged.ckpt")
    trainer.train(args.steps, quiet=False)
    save_checkpoint(args.out, trainer.codec, step=trainer.state.step, rng=trainer.rng)
    print(f"saved checkpoint to {args.out} (final loss {trainer.state.loss_history[-1][1]:.4f})")
    return 0


def cmd_continue_train_decoder(args) -> int:
    model = _load_codec_model(args.checkpoint)
    corpus = _load_corpus(args.corpus_dir)
    codec_mod.continue_train_decoder(model, corpus, args.steps, seed=args.seed)
    save_checkpoint(args.out, model, step=args.steps)
    print(f"saved decoder-continued checkpoint to {args.out}")
    return 0


def cmd_tokenize(args) -> int:
    model = _load_codec_model(args.checkpoint)
    corpus = _load_corpus(args.corpus_dir)
    rows = {utt.utt_id: model.encode(utt.mel) for utt in corpus}
    lm.save_tokens(args.out, rows)
    print(f"wrote {len(rows)} token rows to {args.out}")
    return 0


def cmd_detokenize(args) -> int:
    model = _load_codec_model(args.checkpoint)
    corpus = {utt.utt_id: utt for utt in _load_corpus(args.corpus_dir)}
    rows = lm.load_tokens(args.tokens)
    sampler = _sampler(args.sampler)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = torch.Generator().manual_seed(args.seed)
    for utt_id, tokens in rows.items():
        if utt_id not in corpus:
            print(f"warning: {utt_id} not in corpus manifest, skipped", file=sys.stderr)
            continue
        utt = corpus[utt_id]
        prompt = None
        if args.prompt_fraction > 0:
            prompt = utt.mel.data[: int(args.prompt_fraction * utt.duration_frames)]
        recon = model.decode(tokens, utt.text, sampler, rng, prompt_mel=prompt)
        write_mel_array(out_dir / f"{utt_id}.mel", recon.data)
    print(f"wrote {len(rows)} mel files to {out_dir}")
    return 0


def _codec_tokens_for_lm(model, corpus):
    rows = [model.encode(utt.mel) for utt in corpus]
    texts = [utt.text for utt in corpus]
    return rows, texts


def cmd_train_lm(args, kind: str) -> int:
    model = _load_codec_model(args.checkpoint)
    corpus = _load_corpus(args.corpus_dir)
    rows, texts = _codec_tokens_for_lm(model, corpus)
    vocab = LmVocab(
        text_size=model.config.text_vocab, latent_bits=model.config.quantizer.latent_dim
    )
    block = dict(hidden_size=args.hidden, intermediate_size=4 * args.hidden,
                 n_layers=args.layers, n_heads=4)
    config = LmConfig(
        block=BlockConfig(attention_mode="causal" if kind == "ar" else "bidirectional", **block),
        vocab=vocab,
        kind=kind,
        seed=args.seed,
        total_steps=args.steps,
    )
    trainer = LmTrainer(config, rows, texts)
    trainer.train(args.steps)
    save_checkpoint(args.out, trainer.model, step=args.steps, kind=kind, config=config.to_dict())
    print(f"saved {kind} checkpoint to {args.out} (final loss {trainer.loss_history[-1]:.4f})")
    return 0


def cmd_tts(args) -> int:
    model = _load_codec_model(args.codec_checkpoint)
    lm_model, lm_config = _load_lm(args.lm_checkpoint)
    text_ids = [int(t) for t in args.text.split(",")]
    rng = torch.Generator().manual_seed(args.seed)
    if lm_config.kind == "ar":
        tokens = ar_generate(lm_model, text_ids, rng, temperature=args.temperature, max_tokens=args.max_tokens)
    else:
        n = args.length if args.length else lm.predict_length(text_ids, args.length_ratio)
        tokens, _ = mgm_decode(lm_model, text_ids, n, args.mgm_steps, rng)
    if len(tokens) == 0:
        print("language model produced no tokens", file=sys.stderr)
        return 2
    recon = model.decode(tokens, text_ids, _sampler(args.sampler), rng)
    write_mel_array(Path(args.out), recon.data)
    print(f"synthesized {recon.frames} frames from {len(tokens)} tokens -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = _load_codec_model(args.checkpoint)
    corpus = _load_corpus(args.corpus_dir)
    spec_path = Path(args.corpus_dir) / "corpus_spec.json"
    spec_dict = json.loads(spec_path.read_text())
    spec_dict["mel"] = corpus_mod.MelConfig(**spec_dict["mel"])
    if spec_dict.get("fixed_symbols"):
        spec_dict["fixed_symbols"] = tuple(tuple(s) for s in spec_dict["fixed_symbols"])
    spec = CorpusSpec(**spec_dict)
    report = harness.evaluate_reconstruction(
        model, corpus, spec, _sampler(args.sampler), seed=args.seed,
        prompt_fraction=args.prompt_fraction,
    )
    print(json.dumps(report.summary(), indent=2))
    if args.out:
        harness.write_report(args.out, report)
    return 0


def cmd_ablate(args) -> int:
    spec = harness.AblationSpec(axis=args.axis)
    config = _load_config(args)
    config.trainer = replace(config.trainer, seed=args.seed)
    corpus_spec = _corpus_spec(args)
    table = harness.run_ablation(
        spec, config, corpus_spec, steps=args.steps, out_dir=args.out_dir, eval_seed=args.seed
    )
    print(table.to_text())
    return 0


def cmd_gradcheck(args) -> int:
    from .oracles import build_gradcheck_target

    loss_fn, params, signs_fn = build_gradcheck_target(args.target, seed=args.seed)
    report = harness.gradcheck(loss_fn, params, n_probes=args.probes, seed=args.seed, signs_fn=signs_fn)
    print(
        f"{args.target}: max relative error {report.max_rel_err:.3e} over "
        f"{len(report.probes)} probes ({report.n_redrawn} redrawn at sign boundaries)"
    )
    if report.max_rel_err >= args.tolerance:
        print(f"FAIL: exceeds tolerance {args.tolerance}", file=sys.stderr)
        return 2
    return 0


def cmd_rate(args) -> int:
    report = harness.rate_report_from_values(args.frame_rate, args.bits, args.tokens_per_frame)
    print(f"{harness.format_fraction(report.bitrate_kbps)} kbps")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowtok", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        p.add_argument("--seed", type=int, default=0)
        return p

    p = add("gen-data", cmd_gen_data, help="generate a synthetic corpus")
    p.add_argument("--corpus-dir", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--symbols-min", type=int, default=2)
    p.add_argument("--symbols-max", type=int, default=4)
    p.add_argument("--frames-per-symbol", type=int, default=32)
    p.add_argument("--offset-range", type=float, default=3.0)

    for name, fn in (("train", cmd_train),):
        p = add(name, fn, help="train the codec")
        p.add_argument("--corpus-dir", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--preset", default="desk")
        p.add_argument("--config", help="JSON file with config overrides")
        p.add_argument("--steps", type=int, default=None)

    p = add("continue-train-decoder", cmd_continue_train_decoder,
            help="decoder-only continued training from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=500)

    p = add("tokenize", cmd_tokenize, help="corpus -> token file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus-dir", required=True)
    p.add_argument("--out", required=True)

    p = add("detokenize", cmd_detokenize, help="token file -> mel arrays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus-dir", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--sampler", default="steps32")
    p.add_argument("--prompt-fraction", type=float, default=0.0)

    for kind in ("ar", "mgm"):
        p = add(f"train-{kind}", lambda a, k=kind: cmd_train_lm(a, k),
                help=f"train the {kind} text-to-token model")
        p.add_argument("--checkpoint", required=True, help="codec checkpoint for tokenization")
        p.add_argument("--corpus-dir", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--steps", type=int, default=1500)
        p.add_argument("--hidden", type=int, default=192)
        p.add_argument("--layers", type=int, default=4)

    p = add("tts", cmd_tts, help="text -> tokens -> mel")
    p.add_argument("--codec-checkpoint", required=True)
    p.add_argument("--lm-checkpoint", required=True)
    p.add_argument("--text", required=True, help="comma-separated text ids, e.g. 3,7,9")
    p.add_argument("--out", required=True)
    p.add_argument("--sampler", default="steps32")
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--max-tokens", type=int, default=64)
    p.add_argument("--length", type=int, default=0, help="MGM target length (0 = predict)")
    p.add_argument("--length-ratio", type=float, default=1.0)
    p.add_argument("--mgm-steps", type=int, default=10)

    p = add("eval", cmd_eval, help="reconstruction metrics on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus-dir", required=True)
    p.add_argument("--sampler", default="steps32")
    p.add_argument("--prompt-fraction", type=float, default=0.0)
    p.add_argument("--out")

    p = add("ablate", cmd_ablate, help="run one ablation axis")
    p.add_argument("--axis", required=True, choices=harness.ABLATION_AXES)
    p.add_argument("--preset", default="tiny")
    p.add_argument("--config")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out-dir")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--symbols-min", type=int, default=2)
    p.add_argument("--symbols-max", type=int, default=4)
    p.add_argument("--frames-per-symbol", type=int, default=16)
    p.add_argument("--offset-range", type=float, default=3.0)

    p = add("gradcheck", cmd_gradcheck, help="finite-difference gradient oracle")
    p.add_argument("--target", default="diffusion",
                   choices=("toy", "diffusion", "ar", "mgm"))
    p.add_argument("--probes", type=int, default=24)
    p.add_argument("--tolerance", type=float, default=1e-3)

    p = add("rate", cmd_rate, help="exact token rate / bitrate arithmetic")
    p.add_argument("--frame-rate", required=True)
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--tokens-per-frame", type=int, default=1)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    torch.manual_seed(args.seed)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 0
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
