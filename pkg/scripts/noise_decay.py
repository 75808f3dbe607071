"""Median inversion error of a random single-layer ReLU encoder as the noise level shrinks."""
import argparse

import numpy as np

from liftnet.inversion import single_layer_invert
from liftnet.prox import Relu


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=20)
    parser.add_argument("--deltas", type=float, nargs="+", default=[0.1, 0.02, 0.004])
    args = parser.parse_args()
    W = np.random.default_rng(0).standard_normal((64, 32)) / np.sqrt(32)
    x_true = np.zeros((4, 8))
    x_true[1:3, 2:6] = 1.0
    x_true = x_true.ravel()
    clean = np.maximum(W @ x_true, 0.0)
    lip = np.linalg.norm(W, 2) ** 2
    print("delta,alpha,median_error")
    for delta in args.deltas:
        errs = []
        for s in range(args.seeds):
            y = clean + delta * np.random.default_rng([s]).standard_normal(64)
            x = single_layer_invert(W, np.zeros(64), Relu(), y, delta, (4, 8), tau_x=1.0 / lip,
                                    pdhg_iters=20000, pdhg_tol=1e-9)
            errs.append(np.linalg.norm(x - x_true))
        print(f"{delta},{delta},{np.median(errs):.6f}")


if __name__ == "__main__":
    main()
