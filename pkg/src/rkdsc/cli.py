"""Command line entry point: ``rkdsc <command> --config <path> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .config import ConfigError, parse_config, replace_path
from .runner import COMMANDS, MissingArtifact, run

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


def parse_snr_grid(text: str) -> tuple:
    """``lo:hi:step`` -> inclusive grid of SNR values; a bare number is one point."""
    parts = text.split(":")
    try:
        values = [float(p) for p in parts]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad SNR grid {text!r}; expected lo:hi:step") from exc
    if len(values) == 1:
        return (values[0],)
    if len(values) != 3 or values[2] <= 0 or values[0] > values[1]:
        raise argparse.ArgumentTypeError(f"bad SNR grid {text!r}; expected lo:hi:step with lo <= hi, step > 0")
    lo, hi, step = values
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return tuple(float(lo + i * step) for i in range(n))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rkdsc", description="Architecture search, robust distillation and "
                                                          "channel-aware transmission experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="experiment YAML file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out-dir", help="override out_dir")
    p.add_argument("--snr", type=parse_snr_grid, help="evaluation SNR grid lo:hi:step (dB)")
    p.add_argument("--ratio", type=float, help="override cat.compression_ratio")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = replace_path(cfg, "seed", args.seed)
        if args.out_dir is not None:
            cfg = replace_path(cfg, "out_dir", args.out_dir)
        if args.snr is not None:
            cfg = replace_path(cfg, "eval.snrs", list(args.snr))
        if args.ratio is not None:
            cfg = replace_path(cfg, "cat.compression_ratio", args.ratio)
    except ConfigError as exc:
        print(f"rkdsc: config error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        r = run(args.command, cfg)
    except MissingArtifact as exc:
        print(f"rkdsc: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # report any stage failure as a runtime error
        logging.getLogger("rkdsc").debug("failure", exc_info=True)
        print(f"rkdsc: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    print(r.dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
