"""``aldr`` command line: generate, train, eval.

Exit codes: 0 success, 2 configuration or parameter error, 3 data or file
error, 4 numeric fault.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import pipeline
from .config import SEED_ENV, load_config
from .errors import (
    CheckpointError,
    ConfigError,
    DegenerateInputError,
    DimensionError,
    InputTooShortError,
    NumericFault,
    ParameterError,
    ParseError,
    UnsupportedFormatError,
    ValidationError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _seed(arg) -> int:
    if arg is not None:
        return arg
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def cmd_generate(args) -> int:
    corpus = pipeline.generate_dataset(
        args.out, args.speakers, args.nuisance, args.utts, _seed(args.seed), args.noise, args.heldout, args.force
    )
    print(f"wrote {len(corpus.utterances)} utterances to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {}
    if args.ablation:
        overrides["train.ablation"] = args.ablation
    if args.out:
        overrides["train.out_dir"] = args.out
    cfg = load_config(args.config, overrides or None)
    trainer = pipeline.train_from_config(cfg, resume=args.resume)
    print(f"trained {cfg.train.ablation}: {trainer.step} steps, checkpoint {cfg.out_dir / pipeline.CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_eval(args) -> int:
    res = pipeline.evaluate_checkpoint(args.checkpoint, args.trials, args.out, args.probe, args.manifest, args.source)
    print(f"EER {100 * res.report.eer:.2f}%  minDCF {res.report.c_det_min:.4f}  ({args.out})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aldr", description="Speaker/nuisance disentanglement toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic corpus with manifest and trial list")
    g.add_argument("--out", required=True)
    g.add_argument("--speakers", type=int, default=8)
    g.add_argument("--nuisance", type=int, default=4)
    g.add_argument("--utts", type=int, default=20, help="utterances per speaker")
    g.add_argument("--seed", type=int, default=None, help=f"defaults to ${SEED_ENV}, then 0")
    g.add_argument("--noise", type=float, default=1.0, help="nuisance noise level")
    g.add_argument("--heldout", type=int, default=5, help="trial utterances per speaker")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run both training phases from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--ablation", default=None)
    t.add_argument("--out", default=None, help="overrides train.out_dir")
    t.add_argument("--resume", default=None, metavar="CKPT")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a trial list and write report files")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--trials", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--probe", action="store_true", help="add speaker/nuisance linear probes")
    e.add_argument("--manifest", default=None, help="defaults to manifest.txt next to the trial list")
    e.add_argument("--source", choices=("f_p", "f_e"), default=None, help="embedding source override")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except (NumericFault, DegenerateInputError) as exc:
        code, msg = EXIT_NUMERIC, f"numeric fault: {exc}"
    except (ValidationError, ParseError, UnsupportedFormatError, InputTooShortError, DimensionError, CheckpointError, OSError) as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    print(f"aldr: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
