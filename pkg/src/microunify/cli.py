"""Command-line entry point: ``python -m microunify <command> ...``.

Exit codes: 0 success, 1 usage/config error, 2 data, format or verification error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .data import DataError
from .experiment import (VerificationError, atomic_write, bench_csv, cmd_bench_gemm, cmd_compress,
                         cmd_eval, cmd_train_dense, inspect_model, load_eval_data, load_model)
from .projection import ConstraintError
from .storage import FormatError, compression_ratio

USAGE_ERROR = 1
DATA_ERROR = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="microunify", description="Micro-structured weight unification and pruning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train-dense", help="train the dense baseline")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="checkpoint path (default: out.checkpoint from the config)")

    s = sub.add_parser("compress", help="ADMM-train, finalize and serialize")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", help="evaluate a model file through the micro kernel")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help="config file (test split) or IMAGES.idx[,LABELS.idx]")

    s = sub.add_parser("bench-gemm", help="multiplier counts over block shapes and ratios")
    s.add_argument("--out", required=True)
    s.add_argument("--cols", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("inspect", help="per-layer methods, ratios and magnitude histograms")
    s.add_argument("--model", required=True)

    s = sub.add_parser("ratio", help="compression ratio under both accountings")
    s.add_argument("--model", required=True)
    return p


def _run(args) -> None:
    if args.command == "train-dense":
        cfg = load_config(args.config)
        out = Path(args.out) if args.out else cfg.path("checkpoint", "dense.msu")
        _, metrics = cmd_train_dense(cfg, out)
        print(json.dumps({"checkpoint": str(out), **metrics}, indent=2))
    elif args.command == "compress":
        cfg = load_config(args.config)
        _, run, _ = cmd_compress(cfg, args.checkpoint, Path(args.out))
        print(run.to_json())
    elif args.command == "eval":
        data_arg = args.data
        cfg = load_config(data_arg) if data_arg.endswith(".cfg") else None
        print(json.dumps(cmd_eval(args.model, load_eval_data(data_arg, cfg)), indent=2))
    elif args.command == "bench-gemm":
        text = bench_csv(cmd_bench_gemm(n_cols=args.cols, seed=args.seed))
        atomic_write(args.out, text)
        print(text, end="")
    elif args.command == "inspect":
        print(inspect_model(*load_model(args.model)))
    elif args.command == "ratio":
        model, report = load_model(args.model)
        print(json.dumps({a: compression_ratio(model, report, a)
                          for a in ("magnitudes_only", "with_sign_bits")}, indent=2))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except (ConfigError, ConstraintError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (FormatError, DataError, VerificationError, FileNotFoundError, ValueError,
            FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return DATA_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
