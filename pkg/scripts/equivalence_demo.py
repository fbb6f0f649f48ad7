"""Train K=1 and K=2 side by side on the same epoch stream and print how far apart they drift."""
import argparse
import time

import numpy as np

from dpalex import datapipe as D
from dpalex import model as M
from dpalex.replicasync import train_replicated


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iters", type=int, default=50)
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr", type=float, default=M.Hyper.learning_rate)
    ap.add_argument("--n", type=int, default=2560)
    args = ap.parse_args()

    ds = D.generate_synthetic(args.n, 10, 3, 40, 40, seed=args.seed)
    spec = M.build_alexnet_scaled((3, 32, 32), 10)
    hyper = M.Hyper(args.lr, 0.9)
    runs = {}
    for k in (1, 2):
        t0 = time.perf_counter()
        runs[k] = train_replicated(spec, ds, k, hyper, args.iters, seed=args.seed,
                                   batch_size=args.batch,
                                   preproc=D.PreprocConfig(crop=(32, 32), seed=args.seed))
        print(f"K={k}: {time.perf_counter() - t0:.1f} s, final loss {runs[k].losses[-1]:.5f}")

    gap = np.abs(np.array(runs[1].losses) - np.array(runs[2].losses))
    params = np.abs(M.flat_vector(runs[1].params) - M.flat_vector(runs[2].params)).max()
    print("iter  loss(K=1)   loss(K=2)   |diff|")
    for i in range(0, args.iters, max(1, args.iters // 10)):
        print(f"{i:4d}  {runs[1].losses[i]:.6f}  {runs[2].losses[i]:.6f}  {gap[i]:.2e}")
    print(f"max trace gap {gap.max():.2e}; final parameter gap {params:.2e}")


if __name__ == "__main__":
    main()
