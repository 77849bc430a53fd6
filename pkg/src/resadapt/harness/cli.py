"""
Command-line entry point.

Exit codes: 0 success, 1 a direction check or invariant failed, 2 the
configuration is invalid.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import ConfigError, default_config, load_config
from . import experiments as ex

COMMANDS = ("train", "dataset", "ablate-decoder", "ablate-encoder", "track", "gradcheck", "properties")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="resadapt", description="Residual-dynamics adaptation workbench")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None,
                       help="TOML config (default: the packaged desk config)")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--out", type=Path, default=Path("runs") / name, help="run directory")
        p.add_argument("--cache", type=Path, default=None,
                       help="checkpoint cache (default: $RESADAPT_CACHE or ./checkpoints)")
        if name == "gradcheck":
            p.add_argument("--corrupt", metavar="TENSOR", default=None,
                           help="scale this tensor's analytic gradient by 1.01 (checker self-test)")
        if name == "track":
            p.add_argument("--clean", action="store_true", help="zero-noise, zero-residual world")
    return ap


def _cache_dir(arg) -> Path:
    if arg is not None:
        return arg
    return Path(os.environ.get("RESADAPT_CACHE", "checkpoints"))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else default_config()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    cache = _cache_dir(args.cache)
    cmd = args.command
    if cmd == "train":
        res = ex.run_train(cfg, args.out, cache)
    elif cmd == "dataset":
        res = ex.run_dataset(cfg, args.out)
    elif cmd == "ablate-decoder":
        res = ex.run_decoder_ablation(cfg, args.out, cache)
    elif cmd == "ablate-encoder":
        res = ex.run_encoder_ablation(cfg, args.out, cache)
    elif cmd == "track":
        res = ex.run_tracking(cfg, args.out, cache, clean=args.clean)
    elif cmd == "gradcheck":
        scale = {args.corrupt: 1.01} if args.corrupt else None
        res = ex.run_gradcheck(cfg, args.out, scale)
    else:
        res = ex.run_properties(cfg, args.out)
    if cmd == "train":
        sm = res.summary
        print(f"trained on {sm['samples']} samples, final loss {sm['final_loss']}, checkpoint sha256 {sm['sha256']}")
    for c in res.checks:
        print(c.line())
    print(f"run directory: {args.out}")
    return EXIT_OK if res.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
