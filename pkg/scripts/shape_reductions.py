"""Multiplier and storage reduction of each block shape at full unification."""

import argparse

import numpy as np

from microunify.admm import finalize
from microunify.blocking import BlockShape, partition
from microunify.gemm import count_multiplies
from microunify.nn import Model
from microunify.projection import ConstraintSpec, LayerConstraint
from microunify.storage import compression_ratio

CASES = [("2x2", "fc(64,64)", (64,)), ("4x1", "fc(64,64)", (64,)), ("8x1", "fc(64,64)", (64,)),
         ("2x2x2", "conv(16,16,2,2)", (16, 6, 6))]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ratio", type=float, default=1.0)
    args = ap.parse_args()
    print("block   multipliers  storage(mag)  storage(+signs)")
    for bs, arch, inp in CASES:
        m = Model.from_arch(arch, inp, seed=0)
        final, rep = finalize(m, ConstraintSpec({0: LayerConstraint("unify", BlockShape.parse(bs), args.ratio)}))
        p = partition(final.weights()[0].shape, bs)
        naive = count_multiplies(p, None, 1).multiplies
        micro = count_multiplies(p, rep.layers[0], 1).multiplies
        print(f"{bs:<7} x{naive / micro:<11.3g} x{compression_ratio(final, rep):<12.3g} "
              f"x{compression_ratio(final, rep, 'with_sign_bits'):.3g}")


if __name__ == "__main__":
    main()
