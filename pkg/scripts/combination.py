"""Layer-wise combination of pruning and unification through the full pipeline.

Runs train-dense once, then compresses with each config and prints a summary row.
"""

import argparse
import tempfile
from pathlib import Path

from microunify.config import load_config
from microunify.experiment import cmd_compress, cmd_train_dense

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("configs", nargs="*", default=[str(ROOT / "configs" / f"mlp_{n}.cfg")
                                                   for n in ("unify", "prune", "mixed")])
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        ck = Path(tmp) / "dense.msu"
        cmd_train_dense(load_config(args.configs[0]), ck)
        print(f"{'config':<16}{'acc':>8}{'dense':>8}{'x mag':>8}{'x sign':>8}{'mults':>10}  methods")
        for path in args.configs:
            _, run, _ = cmd_compress(load_config(path), ck)
            methods = " ".join(f"{k}:{v}" for k, v in run.layer_methods.items())
            print(f"{Path(path).stem:<16}{run.compressed_metric:>8.3f}{run.baseline_metric:>8.3f}"
                  f"{run.ratio_magnitudes_only:>8.2f}{run.ratio_with_sign_bits:>8.2f}"
                  f"{run.measured_multiplies:>10d}  {methods}")


if __name__ == "__main__":
    main()
