"""Train on the default synthetic set and report held-out error every few hundred steps."""
import argparse

from dpalex import cli
from dpalex import datapipe as D
from dpalex import model as M
from dpalex.replicasync import ReplicatedRun


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iters", type=int, default=500)
    ap.add_argument("--every", type=int, default=100)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    train = D.generate_synthetic(2560, 10, 3, 40, 40, seed=0)
    val = D.generate_synthetic(2560, 10, 3, 40, 40, seed=0, split=1)
    mean = D.compute_mean_image(train)
    spec = M.build_alexnet_scaled((3, 32, 32), 10)
    preproc = D.PreprocConfig(crop=(32, 32), seed=args.seed)

    def observer(event, rid, it, params):
        if event == "synced" and rid == 0 and (it + 1) % args.every == 0:
            top1, top5 = cli.evaluate(spec, params, val, mean, (32, 32))
            print(f"iter {it + 1:5d}  top-1 {top1:.4f}  top-5 {top5:.4f}", flush=True)

    run = ReplicatedRun(spec, train, args.workers, M.Hyper(), args.iters, batch_size=256,
                        seed=args.seed, preproc=preproc, mean=mean, observer=observer)
    result = run.run()
    print(f"final training loss {result.losses[-1]:.5f}")


if __name__ == "__main__":
    main()
