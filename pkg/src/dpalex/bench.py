"""Timing harness: seconds per 20 iterations across workers, loading mode and transport."""
from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from . import datapipe as D
from . import model as M
from .replicasync import ReplicatedRun, SyncReport, TransportMode, WorkloadStub

CSV_FIELDS = ("workers", "parallel_loading", "transport", "global_batch", "iters",
              "seconds_per_20", "images_per_sec")


@dataclass(frozen=True)
class BenchConfig:
    workers: int = 1
    parallel_loading: bool = True
    transport: TransportMode = TransportMode.DIRECT
    global_batch: int = 256
    iters: int = 20
    repetitions: int = 3
    warmup: int = 2

    def __post_init__(self):
        object.__setattr__(self, "transport", TransportMode(self.transport))
        if self.workers < 1 or self.global_batch % self.workers:
            raise ValueError(f"global batch {self.global_batch} must split evenly over "
                             f"{self.workers} workers")
        if self.repetitions < 3:
            raise ValueError(f"repetitions must be >= 3, got {self.repetitions}")
        if self.iters < 1 or self.warmup < 0:
            raise ValueError(f"need iters >= 1 and warmup >= 0 in {self}")


@dataclass
class TimingRecord:
    workers: int
    parallel_loading: bool
    transport: str
    global_batch: int
    iters: int
    seconds_per_20: float
    images_per_sec: float
    spread: tuple[float, float] = field(default=(0.0, 0.0), compare=False)
    sync: Optional[SyncReport] = field(default=None, compare=False)

    @property
    def key(self) -> tuple:
        return (self.parallel_loading, self.transport, self.workers)


def run_benchmark(matrix: Sequence[BenchConfig], spec: M.NetworkSpec, dataset: D.RawDataset,
                  seed: int = 0, hyper: Optional[M.Hyper] = None,
                  stub: Optional[WorkloadStub] = None,
                  preproc: Optional[D.PreprocConfig] = None) -> list[TimingRecord]:
    """Time every config; each repetition is a fresh run whose setup is not timed."""
    hyper = hyper or M.Hyper()
    for cfg in matrix:
        if dataset.n < cfg.global_batch:
            raise ValueError(f"dataset of {dataset.n} images too small for {cfg}")
        if stub is None and dataset.image_shape[0] != spec.input_shape[0]:
            raise ValueError(f"dataset has {dataset.image_shape[0]} channels, network "
                             f"expects {spec.input_shape[0]}")
    mean = D.compute_mean_image(dataset)

    records = []
    for cfg in matrix:
        times, sync = [], None
        for rep in range(cfg.repetitions):
            run = ReplicatedRun(spec, dataset, cfg.workers, hyper, cfg.iters,
                                batch_size=cfg.global_batch,
                                parallel_loading=cfg.parallel_loading,
                                transport=cfg.transport, seed=seed, preproc=preproc,
                                mean=mean, warmup=cfg.warmup, stub=stub)
            run.setup()
            result = run.run()
            times.append(result.seconds * 20 / cfg.iters)
            sync = result.report
        secs = statistics.median(times)
        records.append(TimingRecord(
            cfg.workers, cfg.parallel_loading, cfg.transport.value, cfg.global_batch,
            cfg.iters, secs, 20 * cfg.global_batch / secs, (min(times), max(times)), sync))
    return records


def grid(workers: Iterable[int] = (1, 2), loading: Iterable[bool] = (True, False),
         transports: Iterable[TransportMode] = (TransportMode.DIRECT,), **kw) -> list[BenchConfig]:
    """One config per (loading mode, transport, worker count) combination."""
    return [BenchConfig(workers=k, parallel_loading=pl, transport=t, **kw)
            for pl in loading for t in transports for k in workers]


# -- reporting ---------------------------------------------------------------

def to_csv(records: Sequence[TimingRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in records:
        writer.writerow([r.workers, "yes" if r.parallel_loading else "no", r.transport,
                         r.global_batch, r.iters, repr(r.seconds_per_20),
                         repr(r.images_per_sec)])
    return buf.getvalue()


def parse_csv(text: str) -> list[TimingRecord]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_FIELDS:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    return [TimingRecord(int(row["workers"]), row["parallel_loading"] == "yes",
                         row["transport"], int(row["global_batch"]), int(row["iters"]),
                         float(row["seconds_per_20"]), float(row["images_per_sec"]))
            for row in reader]


def render_table(records: Sequence[TimingRecord]) -> str:
    """Grid of seconds per 20 iterations: loading-mode rows, transport/worker columns."""
    cols = sorted({(r.transport, r.workers) for r in records})
    cells = {r.key: r for r in records}
    header = ["Parallel loading"] + [f"{t} {k}-worker" for t, k in cols]
    rows = [header]
    for pl in (True, False):
        if not any(r.parallel_loading == pl for r in records):
            continue
        row = ["Yes" if pl else "No"]
        for t, k in cols:
            rec = cells.get((pl, t, k))
            if rec is None:
                row.append("-")
            else:
                lo, hi = rec.spread
                row.append(f"{rec.seconds_per_20:.3f} [{lo:.3f}-{hi:.3f}]")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["Training time per 20 iterations (sec), median [min-max]"]
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_report(records: Sequence[TimingRecord]) -> tuple[str, str]:
    """Human-readable grid and machine-readable CSV."""
    return render_table(records), to_csv(records)
