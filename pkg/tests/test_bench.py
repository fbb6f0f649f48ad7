import time

import pytest
from hypothesis import given, settings, strategies as st

from dpalex import bench as B
from dpalex import datapipe as D
from dpalex import model as M
from dpalex.replicasync import TransportMode, WorkloadStub
from dpalex.tensor import ConvSpec

STUB_SPEC = M.NetworkSpec((1, 2, 2), [M.Flatten(), M.Dense(2), M.SoftmaxXent(2)])


@pytest.fixture(scope="module")
def tiny_ds():
    return D.generate_synthetic(64, 2, 1, 2, 2, seed=0)


def stub_time(ds, stub, **cfg):
    cfg.setdefault("global_batch", 8)
    (rec,) = B.run_benchmark([B.BenchConfig(**cfg)], STUB_SPEC, ds, stub=stub)
    return rec


def test_grid_mirrors_table_layout():
    matrix = B.grid((1, 2), (True, False), tuple(TransportMode), global_batch=8)
    cells = {(c.parallel_loading, c.transport, c.workers) for c in matrix}
    assert len(matrix) == len(cells) == 8


def test_config_validation():
    with pytest.raises(ValueError, match="split evenly"):
        B.BenchConfig(workers=3, global_batch=256)
    with pytest.raises(ValueError, match="repetitions"):
        B.BenchConfig(repetitions=2)


def test_rejects_mismatched_dataset_before_timing(tiny_ds):
    # the first config is fine, but nothing may run once the second is rejected
    stub = WorkloadStub(setup_delay=5.0)
    t0 = time.perf_counter()
    with pytest.raises(ValueError, match="too small"):
        B.run_benchmark([B.BenchConfig(global_batch=8), B.BenchConfig(global_batch=128)],
                        STUB_SPEC, tiny_ds, stub=stub)
    assert time.perf_counter() - t0 < 1.0


def test_record_invariants(tiny_ds):
    rec = stub_time(tiny_ds, WorkloadStub(0.005, 0.0), iters=10)
    assert rec.seconds_per_20 > 0
    assert rec.images_per_sec == pytest.approx(20 * rec.global_batch / rec.seconds_per_20)
    lo, hi = rec.spread
    assert lo <= rec.seconds_per_20 <= hi
    assert rec.sync.rounds == 10 + 2


def test_setup_is_not_timed(tiny_ds):
    # the setup is 10x longer than the whole timed loop
    rec = stub_time(tiny_ds, WorkloadStub(0.01, 0.0, setup_delay=2.0), iters=20, warmup=0)
    assert 0.2 <= rec.seconds_per_20 < 0.3


def test_parallel_loading_overlaps(tiny_ds):
    stub = WorkloadStub(0.05, 0.05)
    on = stub_time(tiny_ds, stub, parallel_loading=True)
    off = stub_time(tiny_ds, stub, parallel_loading=False)
    assert on.seconds_per_20 / off.seconds_per_20 <= 0.65


def test_parallel_loading_never_hurts(tiny_ds):
    stub = WorkloadStub(0.02, 0.002)
    for k in (1, 2):
        on = stub_time(tiny_ds, stub, workers=k, parallel_loading=True)
        off = stub_time(tiny_ds, stub, workers=k, parallel_loading=False)
        assert on.seconds_per_20 <= off.seconds_per_20 * 1.05


def test_sleeping_replicas_scale(tiny_ds):
    # sleep delays split across replicas, so this holds even on one core
    stub = WorkloadStub(0.04, 0.0)
    one = stub_time(tiny_ds, stub, workers=1)
    two = stub_time(tiny_ds, stub, workers=2)
    assert two.seconds_per_20 / one.seconds_per_20 <= 0.65


def test_real_network_benchmark_runs():
    ds = D.generate_synthetic(64, 4, 3, 10, 10, seed=0)
    spec = M.NetworkSpec((3, 8, 8), [M.Conv(ConvSpec(4, (3, 3), 1, 1)), M.ReLU(), M.Flatten(),
                                     M.Dense(4), M.SoftmaxXent(4)])
    recs = B.run_benchmark(B.grid((1, 2), (True,), global_batch=16, iters=3, warmup=1),
                           spec, ds, preproc=D.PreprocConfig(crop=(8, 8)))
    assert [r.workers for r in recs] == [1, 2]
    assert all(r.sync.bytes_per_round == (r.workers - 1) * (12 + 4 * M.init_params(spec, 0).size)
               for r in recs)


# -- reporting ---------------------------------------------------------------

def test_empty_report_is_header_only():
    table, text = B.render_report([])
    assert text == ",".join(B.CSV_FIELDS) + "\n"
    assert B.parse_csv(text) == []
    assert "Parallel loading" in table


def test_csv_columns_fixed():
    rec = B.TimingRecord(2, True, "direct", 256, 20, 1.5, 20 * 256 / 1.5)
    text = B.to_csv([rec])
    header, row = text.splitlines()
    assert header == "workers,parallel_loading,transport,global_batch,iters,seconds_per_20,images_per_sec"
    assert len(row.split(",")) == 7


@settings(max_examples=50, deadline=None)
@given(st.lists(st.builds(
    B.TimingRecord, st.integers(1, 64), st.booleans(), st.sampled_from(["direct", "staged"]),
    st.integers(1, 4096), st.integers(1, 1000),
    st.floats(1e-6, 1e6, allow_nan=False), st.floats(1e-6, 1e9, allow_nan=False)),
    max_size=8))
def test_csv_round_trip(records):
    assert B.parse_csv(B.to_csv(records)) == records


def test_table_layout():
    recs = [B.TimingRecord(k, pl, "direct", 256, 20, 10.0 / k, 0.0, (9.0 / k, 11.0 / k))
            for pl in (True, False) for k in (1, 2)]
    table = B.render_table(recs).splitlines()
    assert "direct 1-worker" in table[1] and "direct 2-worker" in table[1]
    assert table[3].startswith("Yes") and table[4].startswith("No")
    assert "5.000 [4.500-5.500]" in table[3]
