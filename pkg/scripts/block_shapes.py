"""Accuracy / MACs trade-off of block shapes on a small conv classifier.

Trains one dense baseline on synthetic blobs reshaped to 2x4x4 images, then
compresses it with every block shape at the given ratio.
"""

import argparse
import csv
import sys

from microunify.admm import AdmmConfig, admm_train, finalize
from microunify.blocking import BlockShape
from microunify.data import Dataset, synthetic_classify
from microunify.gemm import macs_estimate
from microunify.nn import Model, TrainConfig, evaluate, fit
from microunify.projection import ConstraintSpec, LayerConstraint
from microunify.storage import compression_ratio

ARCH = "conv(16,2,3,3,1,1) relu conv(16,16,3,3,1,1) relu flatten fc(3,256)"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ratio", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iterations", type=int, default=15)
    args = ap.parse_args()
    blobs = synthetic_classify(args.seed, n=600)
    data = Dataset(blobs.x.reshape(-1, 2, 4, 4), blobs.y)
    train, test = data.split(0.25)
    dense = Model.from_arch(ARCH, (2, 4, 4), seed=args.seed)
    fit(dense, train, TrainConfig(epochs=30, lr=0.02, seed=args.seed))
    w = csv.writer(sys.stdout)
    w.writerow(["block", "ratio", "accuracy", "dense_accuracy", "gmacs", "dense_gmacs", "compression"])
    for bs in ("2x2", "4x1", "8x1", "2x2x2"):
        # only the middle conv is constrained; first and last layers stay dense
        spec = ConstraintSpec({2: LayerConstraint("unify", BlockShape.parse(bs), args.ratio)})
        trained, _ = admm_train(dense, train, spec, AdmmConfig(K=args.iterations, lr=0.002, seed=args.seed))
        final, rep = finalize(trained, spec)
        est = macs_estimate(final, spec)
        w.writerow([bs, args.ratio, f"{evaluate(final, test):.4f}", f"{evaluate(dense, test):.4f}",
                    f"{est.gmacs():.6f}", f"{est.dense_total / 1e9:.6f}", f"{compression_ratio(final, rep):.3f}"])


if __name__ == "__main__":
    main()
