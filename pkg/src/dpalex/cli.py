"""Command-line entry point: ``dpalex {gen-data,train,eval,bench}``.

Exit codes: 0 on success, 2 on usage errors (bad or missing flags,
indivisible batch), 1 on runtime errors. Every command first prints its
effective configuration as a JSON line prefixed with ``config:``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import bench as B
from . import datapipe as D
from . import model as M
from .replicasync import TransportMode, WorkloadStub, train_replicated


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _size(text: str) -> tuple[int, int, int]:
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected c:h:w, got {text!r}")
    return tuple(_positive_int(p) for p in parts)


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on or off, got {text!r}")
    return text == "on"


def _crop(text: str):
    if text == "auto":
        return None
    try:
        h, w = (int(v) for v in text.split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW or auto, got {text!r}") from None
    return (h, w)


def default_crop(h: int, w: int) -> tuple[int, int]:
    """Largest multiple of 8 not above 80% of each side (40 -> 32)."""
    crop = tuple(max(8, (int(0.8 * s) // 8) * 8) for s in (h, w))
    return crop


def mean_path(data_path) -> Path:
    return Path(data_path).with_suffix(".pdm")


def _print_config(command: str, args: argparse.Namespace) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    print("config: " + json.dumps({"command": command, **cfg}, default=str, sort_keys=True))


def _load_data(path):
    ds = D.read_dataset(path)
    mp = mean_path(path)
    mean = D.read_mean(mp) if mp.exists() else D.compute_mean_image(ds)
    return ds, mean


def _network(ds: D.RawDataset, crop, width_scale: float):
    c, h, w = ds.image_shape
    crop = crop or default_crop(h, w)
    return M.build_alexnet_scaled((c, *crop), ds.classes, width_scale), crop


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    c, h, w = args.size
    ds = D.generate_synthetic(args.n, args.classes, c, h, w, args.seed, split=args.split)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data = D.encode_dataset(ds)
    mean = D.encode_mean(D.compute_mean_image(ds))
    out.write_bytes(data)
    mean_path(out).write_bytes(mean)
    digest = hashlib.sha256(data + mean).hexdigest()
    print(f"wrote {out} ({ds.n} images, {ds.classes} classes, {c}x{h}x{w}) "
          f"and {mean_path(out)}")
    print(f"digest: {digest}")
    return 0


def cmd_train(args) -> int:
    ds, mean = _load_data(args.data)
    spec, crop = _network(ds, args.crop, args.width_scale)
    if ds.n < args.batch:
        raise ValueError(f"dataset {args.data} has {ds.n} images, fewer than one global "
                         f"batch of {args.batch}")
    preproc = D.PreprocConfig(crop=crop, seed=args.seed)
    hyper = M.Hyper(args.lr, args.momentum)
    print(f"per-replica batch: {args.batch // args.workers} x {args.workers} workers")
    result = train_replicated(spec, ds, args.workers, hyper, args.iters,
                              parallel_loading=args.parallel_load,
                              transport=TransportMode(args.transport), seed=args.seed,
                              batch_size=args.batch, preproc=preproc, mean=mean,
                              init_std=args.init_std)
    Path(args.out_params).write_bytes(M.flatten_state(result.params))
    Path(args.trace).write_text("".join(f"{loss!r}\n" for loss in result.losses))
    rep = result.report
    print(f"final loss {result.losses[-1]:.6f} after {args.iters} iterations; "
          f"{rep.rounds} sync rounds, {rep.bytes_per_round} bytes/round")
    print(f"wrote {args.out_params} and {args.trace}")
    return 0


def evaluate(spec: M.NetworkSpec, params: M.ParamState, ds: D.RawDataset, mean: np.ndarray,
             crop: tuple[int, int], batch: int = 500) -> tuple[float, float]:
    """Top-1 and top-5 error with a center crop and no flip."""
    cfg = D.PreprocConfig(crop=crop)
    hw = ds.image_shape[1:]
    wrong1 = wrong5 = 0
    k = min(5, ds.classes)
    for start in range(0, ds.n, batch):
        px = ds.pixels[start:start + batch]
        labels = ds.labels[start:start + batch].astype(np.int64)
        mb = D.preprocess(px, labels, mean, cfg, D.center_crop(cfg, hw, len(px)))
        logits = M.predict(spec, params, mb.images)
        order = np.argsort(-logits, axis=1, kind="stable")
        wrong1 += int(np.sum(order[:, 0] != labels))
        wrong5 += int(np.sum(~(order[:, :k] == labels[:, None]).any(axis=1)))
    return wrong1 / ds.n, wrong5 / ds.n


def cmd_eval(args) -> int:
    ds = D.read_dataset(args.data)
    mean = D.read_mean(args.mean or mean_path(args.data))
    spec, crop = _network(ds, args.crop, args.width_scale)
    params = M.unflatten_state(Path(args.params).read_bytes(), spec)
    top1, top5 = evaluate(spec, params, ds, mean, crop)
    print(f"top-1 error: {top1:.4f}")
    print(f"top-5 error: {top5:.4f}")
    return 0


def parse_grid(text: str) -> dict:
    """``workers=1,2;loading=on,off;transport=direct,staged`` -> grid kwargs."""
    out = {}
    for part in filter(None, text.split(";")):
        key, _, values = part.partition("=")
        items = [v for v in values.split(",") if v]
        if key == "workers":
            out["workers"] = [_positive_int(v) for v in items]
        elif key == "loading":
            out["loading"] = [_on_off(v) for v in items]
        elif key == "transport":
            out["transports"] = [TransportMode(v) for v in items]
        else:
            raise argparse.ArgumentTypeError(f"unknown grid key {key!r}")
        if not items:
            raise argparse.ArgumentTypeError(f"grid key {key!r} has no values")
    return out


def _grid_arg(text: str) -> dict:
    try:
        return parse_grid(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _stub_arg(text: str):
    if text == "none":
        return None
    parts = text.split(",")
    try:
        if len(parts) not in (2, 3):
            raise ValueError
        compute_ms, load_ms = float(parts[0]), float(parts[1])
        work = int(parts[2]) if len(parts) == 3 else 0
        return WorkloadStub(compute_ms / 1000, load_ms / 1000, compute_work=work)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected COMPUTE_MS,LOAD_MS[,WORK] or none, got {text!r}") from None


def cmd_bench(args) -> int:
    ds, _ = _load_data(args.data)
    spec, crop = _network(ds, args.crop, args.width_scale)
    matrix = B.grid(**args.grid, global_batch=args.batch, iters=args.iters,
                    repetitions=args.reps, warmup=args.warmup)
    for cfg in matrix:
        if cfg.global_batch % cfg.workers:
            raise ValueError(f"--batch {args.batch} not divisible by {cfg.workers} workers")
    records = B.run_benchmark(matrix, spec, ds, args.seed, stub=args.stub,
                              preproc=D.PreprocConfig(crop=crop, seed=args.seed))
    table, text = B.render_report(records)
    print(table, end="")
    if args.out_csv:
        Path(args.out_csv).write_text(text)
        print(f"wrote {args.out_csv}")
    else:
        print(text, end="")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpalex", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("gen-data", help="write a synthetic dataset and its mean image",
                       formatter_class=fmt)
    p.add_argument("--out", default="data/train.pds", help="dataset path; mean goes to .pdm")
    p.add_argument("--n", type=_positive_int, default=2560, help="number of images")
    p.add_argument("--classes", type=_positive_int, default=10)
    p.add_argument("--size", type=_size, default=(3, 40, 40), help="image size c:h:w")
    p.add_argument("--seed", type=int, default=0, help="fixes the class means")
    p.add_argument("--split", type=int, default=0, help="independent sample draw, e.g. 1 for validation")
    p.set_defaults(func=cmd_gen_data)

    def common(p):
        p.add_argument("--crop", type=_crop, default="auto", help="crop HxW, or auto (40 -> 32)")
        p.add_argument("--width-scale", type=float, default=0.125,
                       help="channel multiplier on the (64,128,192,192,128) base widths")

    p = sub.add_parser("train", help="data-parallel training", formatter_class=fmt)
    p.add_argument("--data", default="data/train.pds")
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--batch", type=_positive_int, default=256,
                   help="global batch, split evenly across workers")
    p.add_argument("--iters", type=_positive_int, default=500)
    p.add_argument("--parallel-load", type=_on_off, default=True, help="on or off")
    p.add_argument("--transport", choices=[t.value for t in TransportMode], default="direct")
    p.add_argument("--lr", type=float, default=M.Hyper.learning_rate)
    p.add_argument("--momentum", type=float, default=M.Hyper.momentum)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-std", type=float, default=None,
                   help="fixed weight std; default is fan-in scaling")
    p.add_argument("--out-params", default="params.pps")
    p.add_argument("--trace", default="loss.txt")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1/top-5 error with center crops", formatter_class=fmt)
    p.add_argument("--data", default="data/val.pds")
    p.add_argument("--params", default="params.pps")
    p.add_argument("--mean", default=None,
                   help="training mean image; defaults to the .pdm next to --data")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time 20-iteration runs over a config grid",
                       formatter_class=fmt)
    p.add_argument("--data", default="data/train.pds")
    p.add_argument("--grid", type=_grid_arg, default="workers=1,2;loading=on,off;transport=direct",
                   help="semicolon-separated key=v1,v2 for workers, loading, transport")
    p.add_argument("--reps", type=int, default=3, help="repetitions per cell (>= 3)")
    p.add_argument("--iters", type=_positive_int, default=20)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--batch", type=_positive_int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stub", type=_stub_arg, default="none",
                   help="COMPUTE_MS,LOAD_MS[,WORK] stub replacing the real network; "
                        "WORK adds CPU-bound passes per global batch")
    p.add_argument("--out-csv", default=None)
    common(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and args.batch % args.workers:
        parser.error(f"--batch {args.batch} is not divisible by --workers {args.workers}")
    if args.command == "bench" and args.reps < 3:
        parser.error(f"--reps must be >= 3, got {args.reps}")
    _print_config(args.command, args)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
