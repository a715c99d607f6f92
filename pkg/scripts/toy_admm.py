"""ADMM on f(W) = ||W - a||^2 with a single unified [2,1] block; prints the residual trace."""

import argparse

from microunify.admm import AdmmConfig, QuadraticObjective, admm_train, history_to_csv
from microunify.blocking import BlockShape
from microunify.projection import ConstraintSpec, LayerConstraint


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--target", type=float, nargs=2, default=[1.0, 3.0])
    ap.add_argument("--rho-max", type=float, default=2.0)
    ap.add_argument("--iterations", type=int, default=500)
    ap.add_argument("--csv", help="write the history here")
    args = ap.parse_args()
    obj = QuadraticObjective(args.target)
    spec = ConstraintSpec({0: LayerConstraint("unify", BlockShape.parse("2x1"), 1.0)})
    cfg = AdmmConfig(K=args.iterations, inner_epochs=10, rho_max=args.rho_max, lr=0.1, momentum=0.0,
                     weight_decay=0.0, batch_size=None, tol=1e-7)
    trained, hist = admm_train(obj, obj.dataset(), spec, cfg)
    for h in hist[:: max(1, len(hist) // 15)]:
        print(f"iter {h.iteration:4d}  rho {h.rho:.4g}  residual {h.residual:.3e}")
    print(f"final W = {trained.w.ravel().tolist()} after {len(hist)} iterations")
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(history_to_csv(hist))


if __name__ == "__main__":
    main()
