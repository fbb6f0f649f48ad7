"""Regenerate the seconds-per-20-iterations grid (loading mode x transport x workers).

Runs the real scaled network by default; ``--stub`` swaps in injected delays
so the structure of the table can be checked on any machine.
"""
import argparse
from pathlib import Path

from dpalex import bench as B
from dpalex import datapipe as D
from dpalex import model as M
from dpalex.replicasync import TransportMode, WorkloadStub


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workers", default="1,2")
    ap.add_argument("--transports", default="direct,staged")
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--stub", action="store_true",
                    help="50 ms compute + 50 ms load per global batch instead of the network")
    ap.add_argument("--out-csv", type=Path, default=Path("results/table.csv"))
    args = ap.parse_args()

    ds = D.generate_synthetic(2560, 10, 3, 40, 40, seed=0)
    spec = M.build_alexnet_scaled((3, 32, 32), 10)
    matrix = B.grid([int(k) for k in args.workers.split(",")], (True, False),
                    [TransportMode(t) for t in args.transports.split(",")],
                    global_batch=args.batch, repetitions=args.reps)
    stub = WorkloadStub(0.05, 0.05) if args.stub else None
    records = B.run_benchmark(matrix, spec, ds, stub=stub,
                              preproc=D.PreprocConfig(crop=(32, 32)))
    table, text = B.render_report(records)
    print(table)
    args.out_csv.parent.mkdir(parents=True, exist_ok=True)
    args.out_csv.write_text(text)
    print(f"wrote {args.out_csv}")


if __name__ == "__main__":
    main()
