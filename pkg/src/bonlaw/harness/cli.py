"""Command-line entry point: ``bonlaw <command> [--config F] [--seed S] [--out D] [--threads N]``.

Exit codes: 0 success, 1 runtime error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import COMMANDS, ConfigError, load_toml, resolve
from .io import IngestError
from .recipes import RecipeError
from .runner import resolve_out_dir, run_experiment

log = logging.getLogger("bonlaw")

_HELP = {
    "simulate-oracle": "oracle Best-of-N curve on a synthetic population plus its sqrt(ln N) fit",
    "simulate-correlation": "mean-strategy curves at several predictor correlations",
    "validate-unified-law": "measure alpha/beta/rho, predict the mean-strategy curve and score it",
    "diagnose": "collapse/hacking report and assumption checks for a scored population",
    "train-prm": "train per-user probabilistic reward models on feature data",
    "failure-experiment": "matched MSE vs NLL training on a mixed low/normal label-variance population",
    "strategies": "utility curves for every selection strategy",
    "ingest-check": "validate a candidate score CSV and re-emit it canonically",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 as well; keep the message terse
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v <= 2**64 - 1:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^64 - 1]")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bonlaw", description="Best-of-N scaling-law experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name, help=_HELP[name])
        s.add_argument("--config", type=Path, help="TOML config file")
        s.add_argument("--seed", type=_u64, help="global seed (overrides the config)")
        s.add_argument("--out", help="output directory (overrides BONLAW_OUT and the config)")
        s.add_argument("--threads", type=_positive, help="worker threads (outputs do not depend on it)")
        if name in ("diagnose", "train-prm", "strategies", "ingest-check"):
            s.add_argument("--input", help="candidate score CSV (overrides the config)")
    return p


_INPUT_SECTION = {"diagnose": "diagnose", "train-prm": "prm", "strategies": "strategies", "ingest-check": "ingest"}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        raw = load_toml(args.config) if args.config else {}
        base = args.config.resolve().parent if args.config else Path.cwd()
        if getattr(args, "input", None):
            sec = _INPUT_SECTION[args.command]
            raw = {**raw, sec: {**raw.get(sec, {}), "input": str(Path(args.input).resolve())}}
        cfg = resolve(args.command, raw, seed=args.seed, threads=args.threads, base_dir=base)
        out_dir = resolve_out_dir(cfg, args.out)
    except ConfigError as exc:
        print(f"bonlaw: {exc}", file=sys.stderr)
        return 2
    try:
        manifest = run_experiment(cfg, out_dir)
    except (IngestError, RecipeError, ValueError, OSError, ArithmeticError) as exc:
        print(f"bonlaw: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    log.info("wrote %d files to %s", len(manifest.files), out_dir)
    print(out_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
