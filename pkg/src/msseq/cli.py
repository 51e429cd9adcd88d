"""Command-line entry point.

Subcommands: gendata, train, run, gradcheck, eval. Exit codes: 0 success,
2 usage error, 3 numerical failure, 4 check/threshold failure, 1 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import data as datamod
from . import gradcheck as gcmod
from . import training as trmod
from .errors import (ConfigError, DimensionError, FormatError, InputKindError,
                     MsseqError, NumericsError)
from .masking import MaskSelection

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_CHECK = 4


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msseq")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--preset", choices=cfgmod.PRESETS, default="desk")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--out", help="output directory", default="run")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a single config key (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gendata", help="generate the synthetic corpus")
    g.add_argument("--n", type=int, default=32)
    g.add_argument("--len-min", type=int, default=5)
    g.add_argument("--len-max", type=int, default=12)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", choices=("tts", "vc", "joint", "adapt"),
                   required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--steps", type=int, help="override max_steps")
    t.add_argument("--init-tts", help="stand-alone tts checkpoint (joint)")
    t.add_argument("--init-vc", help="stand-alone vc checkpoint (joint)")
    t.add_argument("--init", help="checkpoint to adapt from (adapt)")

    r = sub.add_parser("run", help="synthesize/convert with a checkpoint")
    r.add_argument("--mode", choices=("tts", "vc", "hybrid"), required=True)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--tokens", help="space-separated symbol ids")
    r.add_argument("--source-mel", help="MEL1 file with source frames")
    r.add_argument("--out-mel", help="output MEL1 path (default under --out)")
    r.add_argument("--max-steps", type=int, default=200)
    r.add_argument("--dump-align", help="write alignment CSV here")
    r.add_argument("--no-prenet-dropout", action="store_true",
                   help="deterministic generation")

    c = sub.add_parser("gradcheck", help="finite-difference check all layers")
    c.add_argument("--threshold", type=float, default=gcmod.DEFAULT_THRESHOLD)
    c.add_argument("--epsilon", type=float, default=1e-5)

    e = sub.add_parser("eval", help="objective evaluation report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--modes", default="tts,vc,hybrid")
    return p


def _resolve_config(args) -> dict[str, str]:
    layers = [cfgmod.preset_config(args.preset)]
    if args.config:
        layers.append(cfgmod.parse_config_file(args.config))
    overrides: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = v
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    layers.append(overrides)
    return cfgmod.merge_config(*layers)


def _cmd_gendata(args, cfg) -> int:
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    spec = datamod.ToySpec(vocab=cfgmod.cfg_int(cfg, "vocab"),
                           n_mels=cfgmod.cfg_int(cfg, "n_mels"))
    corpus = datamod.gen_corpus(spec, args.n, (args.len_min, args.len_max),
                                seed=cfgmod.cfg_int(cfg, "seed"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    datamod.write_corpus(corpus, out)
    print(f"wrote {len(corpus)} utterances to {out}")
    return EXIT_OK


def _cmd_train(args, cfg) -> int:
    corpus = datamod.load_corpus(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.stage == "tts":
        result = trmod.train_standalone_tts(corpus, cfg, args.steps, out)
    elif args.stage == "vc":
        result = trmod.train_standalone_vc(corpus, cfg, args.steps, out)
    elif args.stage == "joint":
        if not args.init_tts or not args.init_vc:
            raise ConfigError("--stage joint requires --init-tts and --init-vc")
        model = trmod.init_joint(trmod.Checkpoint.load(args.init_tts),
                                 trmod.Checkpoint.load(args.init_vc), cfg)
        result = trmod.train_joint(model, corpus, cfg, args.steps, out)
    else:
        if not args.init:
            raise ConfigError("--stage adapt requires --init")
        result = trmod.adapt_finetune(trmod.Checkpoint.load(args.init),
                                      corpus, cfg, args.steps, out)
    final = result.report.final_metrics.get("final_loss", float("nan"))
    print(f"stage {args.stage}: {len(result.report.loss_rows)} steps, "
          f"final loss {final:.6f}, wall {result.report.wall_time:.1f}s")
    if not np.isfinite(final) and result.report.loss_rows:
        return EXIT_NUMERIC
    return EXIT_OK


def _cmd_run(args, cfg) -> int:
    ckpt = trmod.Checkpoint.load(args.ckpt)
    model, _, _ = trmod.model_from_checkpoint(ckpt)
    mask = datamod.MODE_MASKS[args.mode]
    tokens = None
    src_mel = None
    if mask.text_active:
        if not args.tokens:
            raise InputKindError(f"mode {args.mode!r} requires --tokens")
        tokens = np.array([int(t) for t in args.tokens.split()], dtype=np.int64)
    if mask.speech_active:
        if not args.source_mel:
            raise InputKindError(f"mode {args.mode!r} requires --source-mel")
        src_mel = datamod.load_mel(args.source_mel)
    rng = np.random.default_rng(cfgmod.cfg_int(cfg, "seed"))
    pred, trace = model.generate(
        tokens=tokens, src_mel=src_mel, mask=mask, max_steps=args.max_steps,
        prenet_dropout=not args.no_prenet_dropout, rng=rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    out_mel = Path(args.out_mel) if args.out_mel else out / f"{args.mode}.mel"
    datamod.save_mel(out_mel, pred)
    if args.dump_align:
        with open(args.dump_align, "w") as f:
            f.write("step,source,position,weight\n")
            for step, source, pos, w in trace.csv_rows():
                f.write(f"{step},{source},{pos},{w:.10f}\n")
    print(f"wrote {pred.shape[0]} frames x {pred.shape[1]} bands to {out_mel}")
    return EXIT_OK


def _cmd_gradcheck(args, cfg) -> int:
    results = gcmod.run_all_checks(seed=cfgmod.cfg_int(cfg, "seed"),
                                   epsilon=args.epsilon)
    worst = 0.0
    for name, err in results.items():
        print(f"{name:20s} max rel err {err:.3e}")
        worst = max(worst, err)
    if worst >= args.threshold:
        print(f"FAIL: max rel err {worst:.3e} >= {args.threshold:.1e}")
        return EXIT_CHECK
    print(f"OK: max rel err {worst:.3e} < {args.threshold:.1e}")
    return EXIT_OK


def _cmd_eval(args, cfg) -> int:
    ckpt = trmod.Checkpoint.load(args.ckpt)
    model, _, _ = trmod.model_from_checkpoint(ckpt)
    corpus = datamod.load_corpus(args.corpus)
    modes = [m for m in args.modes.split(",") if m]
    for m in modes:
        if m not in datamod.MODE_MASKS:
            raise ConfigError(f"unknown eval mode {m!r}")
        if datamod.MODE_MASKS[m].text_active and model.enc_t is None:
            raise InputKindError(f"mode {m!r} needs a model with a text encoder")
        if datamod.MODE_MASKS[m].speech_active and model.enc_v is None:
            raise InputKindError(f"mode {m!r} needs a model with a speech encoder")
    report = datamod.evaluate(model, corpus, modes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "eval.csv")
    for m in modes:
        print(f"mode {m:7s} mean L1 {report.mode_mean_l1(m):.6f}")
    print(f"wrote {len(report.rows)} rows to {out / 'eval.csv'}")
    return EXIT_OK


_DISPATCH = {
    "gendata": _cmd_gendata,
    "train": _cmd_train,
    "run": _cmd_run,
    "gradcheck": _cmd_gradcheck,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _resolve_config(args)
        return _DISPATCH[args.command](args, cfg)
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, InputKindError, DimensionError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MsseqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
