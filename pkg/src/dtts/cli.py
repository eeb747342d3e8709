"""Command-line entry point: ``dtts {toy,prepare,train,synth,inspect}``."""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from pathlib import Path

import torch

from . import checkpoint, corpus, diagnostics, signal, training

log = logging.getLogger("dtts")


def ckpt_name(step: int) -> str:
    return f"step_{step:07d}.ckpt"


# ----------------------------------------------------------------------------
# toy / prepare
# ----------------------------------------------------------------------------

def cmd_toy(args) -> int:
    manifest = corpus.make_toy_corpus(args.out, per_speaker=args.per_speaker, seed=args.seed)
    print(manifest)
    return 0


def cmd_prepare(args) -> int:
    out = corpus.resolve_cache(args.out)
    report = corpus.prepare(args.manifest, out, args.provider, seed=args.seed, vocab_path=args.vocab,
                            ssl_dir=args.ssl_dir)
    print(f"prepared {len(report.processed)}, cached {len(report.skipped)}, failed {len(report.failed)} -> {out}")
    for utt, err in report.failed.items():
        print(f"error: {utt}: {err}", file=sys.stderr)
    return 1 if report.failed else 0


# ----------------------------------------------------------------------------
# train
# ----------------------------------------------------------------------------

def _load_config(args) -> training.TrainConfig:
    cfg = training.TrainConfig.from_file(args.config) if args.config else training.TrainConfig()
    if args.steps is not None:
        cfg.steps = args.steps
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    cfg.cache = str(corpus.resolve_cache(cfg.cache or None))
    return cfg


def _reset_metrics(path: Path, upto: int | None) -> None:
    """Fresh header, or keep only rows for steps <= ``upto`` when resuming."""
    header = "\t".join(training.METRIC_COLUMNS) + "\n"
    kept = []
    if upto is not None and path.exists():
        for line in path.read_text().splitlines()[1:]:
            if line and int(line.split("\t", 1)[0]) <= upto:
                kept.append(line + "\n")
    path.write_text(header + "".join(kept))


def run_training(cfg: training.TrainConfig, resume: str | None = None) -> Path:
    torch.set_num_threads(max(1, cfg.threads))
    cache = Path(cfg.cache)
    if not (cache / "corpus.json").exists():
        raise FileNotFoundError(f"no prepared cache at {cache}; run `dtts prepare --manifest ... --out {cache}` first")
    data = corpus.Corpus(cache, cfg.split)
    trainer = training.Trainer(cfg, data)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / "metrics.tsv"
    if resume:
        checkpoint.restore(trainer, resume)
        log.info("resumed from %s at step %d", resume, trainer.step)
    if trainer.step >= cfg.steps:
        path = out / ckpt_name(trainer.step)
        if not path.exists():
            checkpoint.save(trainer, path)
        return path
    cfg.write(out / "config.txt")
    if not resume:
        checkpoint.save(trainer, out / ckpt_name(0))
    _reset_metrics(metrics, trainer.step if resume else None)
    valid = None
    if cfg.valid_every > 0 and (cache / "splits" / "valid.txt").read_text().split():
        valid = corpus.Corpus(cache, "valid").items
    with open(metrics, "a") as fh:
        while trainer.step < cfg.steps:
            res = trainer.train_step()
            fh.write(training.metrics_line(res) + "\n")
            fh.flush()
            if valid is not None and trainer.step % cfg.valid_every == 0:
                ev = trainer.evaluate(valid)
                with open(out / "valid.tsv", "a") as vf:
                    vf.write(f"{trainer.step}\t{ev['mel_l1']!r}\t{ev['ldp_acc']!r}\t{ev['lde_acc']!r}\n")
            if cfg.ckpt_every > 0 and trainer.step % cfg.ckpt_every == 0 and trainer.step < cfg.steps:
                checkpoint.save(trainer, out / ckpt_name(trainer.step))
    final = out / ckpt_name(trainer.step)
    checkpoint.save(trainer, final)
    shutil.copyfile(final, out / "last.ckpt")
    return final


def cmd_train(args) -> int:
    cfg = _load_config(args)
    final = run_training(cfg, args.resume)
    print(final)
    return 0


# ----------------------------------------------------------------------------
# synth
# ----------------------------------------------------------------------------

def synthesize(ckpt: str | Path, text: str, lang: int, spk: int, out_wav: str | Path,
               gl_iters: int = 32, seed: int = 0) -> dict:
    """Inference, Griffin-Lim, wav plus per-stream records next to the wav."""
    symbols = text.split()
    if not symbols:
        raise ValueError("empty IPA string")
    model, meta = checkpoint.load_model(ckpt)
    vocab = corpus.Vocabulary(meta["vocab"])
    tokens = vocab.encode(symbols)
    out = model.synthesize(tokens, lang, spk)
    mel = out["mel"].numpy()
    wav = signal.griffin_lim(mel, iters=gl_iters, seed=seed)
    out_wav = Path(out_wav)
    out_wav.parent.mkdir(parents=True, exist_ok=True)
    signal.save_wav(out_wav, wav)
    stem = out_wav.with_suffix("")
    for key in ("mel", "mel_ld", "mel_sd", "ldp_bin", "lde_bin", "sdp", "sde"):
        signal.write_record(f"{stem}.{key}.f32", out[key].numpy())
    durations = out["durations"].numpy()
    Path(f"{stem}.durations.txt").write_text(
        "".join(f"{s}\t{int(d)}\n" for s, d in zip(symbols, durations)), encoding="utf-8")
    return {"mel": mel, "durations": durations, "samples": wav.size}


def cmd_synth(args) -> int:
    info = synthesize(args.ckpt, args.text, args.lang, args.spk, args.out, args.gl_iters)
    print(f"{args.out}: {info['mel'].shape[0]} frames, {info['samples']} samples")
    return 0


# ----------------------------------------------------------------------------
# inspect
# ----------------------------------------------------------------------------

def read_probes(path: str | Path, vocab: corpus.Vocabulary) -> list[diagnostics.Probe]:
    """One probe sentence per line: language id, tab, space-separated IPA tokens."""
    probes = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        lang, _, text = line.partition("\t")
        if not text.split():
            raise ValueError(f"{path}:{lineno}: expected '<language id>\\t<IPA tokens>'")
        probes.append(diagnostics.Probe(int(lang), vocab.encode(text.split()), text.strip()))
    if not probes:
        raise ValueError(f"{path}: no probe sentences")
    return probes


def inspect_checkpoint(ckpt, probes_path, out, speakers=None, cache=None, n_align: int = 4) -> dict:
    model, meta = checkpoint.load_model(ckpt)
    vocab = corpus.Vocabulary(meta["vocab"])
    probes = read_probes(probes_path, vocab)
    if speakers is None:
        speakers = list(range(model.cfg.n_speakers))
    results = diagnostics.run_probes(model, probes, speakers)
    swaps = diagnostics.swap_grid(model, probes, speakers) if len(speakers) > 1 else {}
    summary = diagnostics.write_bundle(out, results, swaps)
    if cache is not None and (Path(cache) / "corpus.json").exists():
        (Path(out) / "align").mkdir(parents=True, exist_ok=True)
        data = corpus.Corpus(cache)
        for u in data.items[:n_align]:
            diagnostics.dump_alignment(model, u.token_ids, u.mel, Path(out) / "align" / u.utt_id)
    return summary


def cmd_inspect(args) -> int:
    speakers = [int(s) for s in args.speakers.split(",")] if args.speakers else None
    cache = args.cache
    if cache is None and corpus.CACHE_ENV in os.environ:
        cache = corpus.resolve_cache(None)
    summary = inspect_checkpoint(args.ckpt, args.probes, args.out, speakers, cache)
    for key in ("rho", "swap_ratio"):
        if key in summary:
            print(f"{key}\t{summary[key]!r}")
    return 0


# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtts", description="Decoupled cross-lingual TTS toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("toy", help="write the synthetic toy corpus")
    t.add_argument("--out", required=True)
    t.add_argument("--per-speaker", type=int, default=8)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_toy)

    pr = sub.add_parser("prepare", help="build the feature/target cache")
    pr.add_argument("--manifest", required=True)
    pr.add_argument("--out", default=None, help=f"cache directory (${corpus.CACHE_ENV} takes precedence)")
    pr.add_argument("--provider", choices=("file", "stub"), default="stub")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--vocab", default=None, help="vocabulary file (default: vocab.txt next to the manifest)")
    pr.add_argument("--ssl-dir", default=None, help="feature directory for --provider file")
    pr.set_defaults(func=cmd_prepare)

    tr = sub.add_parser("train", help="train from a prepared cache")
    tr.add_argument("--config", default=None)
    tr.add_argument("--steps", type=int, default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--resume", default=None)
    tr.add_argument("--out", default=None, help="run directory (overrides the config)")
    tr.set_defaults(func=cmd_train)

    sy = sub.add_parser("synth", help="synthesize one utterance")
    sy.add_argument("--ckpt", required=True)
    sy.add_argument("--text", required=True, help="space-separated IPA tokens")
    sy.add_argument("--lang", type=int, required=True)
    sy.add_argument("--spk", type=int, required=True)
    sy.add_argument("--out", required=True)
    sy.add_argument("--gl-iters", type=int, default=32)
    sy.set_defaults(func=cmd_synth)

    ins = sub.add_parser("inspect", help="diagnostic bundle for a checkpoint")
    ins.add_argument("--ckpt", required=True)
    ins.add_argument("--probes", required=True)
    ins.add_argument("--out", required=True)
    ins.add_argument("--speakers", default=None, help="comma-separated speaker ids (default: all)")
    ins.add_argument("--cache", default=None, help="prepared cache for alignment dumps")
    ins.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # every failure becomes a message and a nonzero exit
        if args.verbose:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
