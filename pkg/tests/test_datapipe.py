import gc
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpalex import datapipe as D
from oracles import naive_mean


def random_dataset(seed, n=16, c=3, h=5, w=7, classes=4):
    rng = np.random.default_rng(seed)
    return D.RawDataset(rng.integers(0, 256, (n, c, h, w), dtype=np.uint8),
                        rng.integers(0, classes, n).astype(np.uint32), classes)


def wait_for(cond, timeout=2.0):
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        if cond():
            return True
        time.sleep(0.01)
    return cond()


# -- formats -----------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    ds = random_dataset(0)
    D.write_dataset(tmp_path / "a.pds", ds)
    assert D.read_dataset(tmp_path / "a.pds") == ds
    raw = (tmp_path / "a.pds").read_bytes()
    assert raw[:4] == b"PDS1"
    assert len(raw) == 28 + ds.pixels.size + 4 * ds.n


def test_dataset_bad_magic_and_version():
    buf = bytearray(D.encode_dataset(random_dataset(1)))
    with pytest.raises(D.DatasetFormatError, match="magic"):
        D.decode_dataset(b"JUNK" + bytes(buf[4:]))
    buf[4] = 9
    with pytest.raises(D.DatasetFormatError, match="version"):
        D.decode_dataset(bytes(buf))


def test_dataset_length_mismatch():
    buf = D.encode_dataset(random_dataset(2))
    with pytest.raises(D.DatasetFormatError, match="length"):
        D.decode_dataset(buf[:-1])
    with pytest.raises(D.DatasetFormatError, match="length"):
        D.decode_dataset(buf + b"\0")
    with pytest.raises(D.DatasetFormatError, match="header"):
        D.decode_dataset(buf[:10])


def test_dataset_label_out_of_range():
    ds = random_dataset(3)
    buf = bytearray(D.encode_dataset(ds))
    buf[-4:] = (ds.classes).to_bytes(4, "little")
    with pytest.raises(D.DatasetFormatError, match="labels"):
        D.decode_dataset(bytes(buf))


def test_mean_round_trip(tmp_path):
    mean = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
    D.write_mean(tmp_path / "m.pdm", mean)
    back = D.read_mean(tmp_path / "m.pdm")
    assert back.dtype == np.float32 and np.array_equal(back, mean)
    with pytest.raises(D.DatasetFormatError, match="magic"):
        D.decode_mean(b"XXXX" + D.encode_mean(mean)[4:])
    with pytest.raises(D.DatasetFormatError, match="length"):
        D.decode_mean(D.encode_mean(mean)[:-2])


# -- synthetic data ----------------------------------------------------------

def test_synthetic_is_deterministic():
    a = D.generate_synthetic(50, 5, 3, 8, 8, seed=4)
    assert a == D.generate_synthetic(50, 5, 3, 8, 8, seed=4)
    assert a != D.generate_synthetic(50, 5, 3, 8, 8, seed=5)


def test_synthetic_is_balanced():
    ds = D.generate_synthetic(100, 10, 3, 8, 8, seed=0)
    assert np.bincount(ds.labels, minlength=10).tolist() == [10] * 10


def test_synthetic_splits_share_classes():
    train = D.generate_synthetic(200, 4, 3, 16, 16, seed=2, split=0)
    val = D.generate_synthetic(200, 4, 3, 16, 16, seed=2, split=1)
    assert train != val
    mt = np.stack([train.pixels[train.labels == k].mean(axis=0) for k in range(4)])
    mv = np.stack([val.pixels[val.labels == k].mean(axis=0) for k in range(4)])
    dist = np.abs(mt[:, None] - mv[None]).mean(axis=(2, 3, 4))
    # each validation class mean sits closest to its own training class mean
    assert dist.argmin(axis=0).tolist() == [0, 1, 2, 3]


def test_nearest_class_mean_is_accurate():
    train = D.generate_synthetic(1000, 10, 3, 40, 40, seed=0, split=0)
    val = D.generate_synthetic(500, 10, 3, 40, 40, seed=0, split=1)
    centroids = np.stack([train.pixels[train.labels == k].reshape(-1, 3 * 40 * 40)
                          .astype(np.float64).mean(axis=0) for k in range(10)])
    x = val.pixels.reshape(val.n, -1).astype(np.float64)
    dist = ((x[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    acc = (dist.argmin(axis=1) == val.labels).mean()
    assert acc > 0.9


# -- mean image --------------------------------------------------------------

def test_mean_of_one_and_two_images():
    ds = random_dataset(5, n=1)
    assert np.array_equal(D.compute_mean_image(ds), ds.pixels[0].astype(np.float32))
    ds = random_dataset(6, n=2)
    expect = (ds.pixels[0].astype(np.float32) + ds.pixels[1]) / 2
    assert np.array_equal(D.compute_mean_image(ds), expect)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16), n=st.integers(1, 40))
def test_mean_matches_naive_accumulation(seed, n):
    ds = random_dataset(seed, n=n)
    np.testing.assert_allclose(D.compute_mean_image(ds), naive_mean(ds.pixels), atol=1e-3)


# -- preprocessing -----------------------------------------------------------

def test_full_crop_without_flip_is_centered_image():
    ds = random_dataset(7)
    mean = D.compute_mean_image(ds)
    for scale in (1.0, 1 / 64):
        cfg = D.PreprocConfig(crop=(5, 7), flip_prob=0.0, scale=scale)
        draws = D.draw_crop_flip(cfg, (5, 7), ds.n, np.random.default_rng(0))
        mb = D.preprocess(ds.pixels, ds.labels, mean, cfg, draws)
        expect = (ds.pixels.astype(np.float32) - mean) * np.float32(scale)
        assert mb.images.dtype == np.float32
        assert np.array_equal(mb.images, expect)


def test_flip_is_involution():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 5)).astype(np.float32)
    assert np.array_equal(D.flip_horizontal(D.flip_horizontal(x)), x)


def test_crop_and_flip_select_the_right_pixels():
    ds = random_dataset(8, n=2, h=6, w=6)
    mean = np.zeros((3, 6, 6), np.float32)
    cfg = D.PreprocConfig(crop=(3, 4), scale=1.0)
    draws = D.CropFlip(np.array([1, 2]), np.array([0, 2]), np.array([False, True]))
    mb = D.preprocess(ds.pixels, ds.labels, mean, cfg, draws)
    assert mb.images.shape == (2, 3, 3, 4)
    assert np.array_equal(mb.images[0], ds.pixels[0, :, 1:4, 0:4])
    assert np.array_equal(mb.images[1], ds.pixels[1, :, 2:5, 2:6][..., ::-1])


def test_preprocess_is_deterministic():
    ds = random_dataset(9, h=10, w=10)
    mean = D.compute_mean_image(ds)
    cfg = D.PreprocConfig(crop=(6, 6))
    runs = [D.preprocess(ds.pixels, ds.labels, mean, cfg,
                         D.draw_crop_flip(cfg, (10, 10), ds.n, np.random.default_rng(42)))
            for _ in range(2)]
    assert np.array_equal(runs[0].images, runs[1].images)


def test_preprocess_rejects_oversized_crop_and_bad_mean():
    ds = random_dataset(10)
    cfg = D.PreprocConfig(crop=(6, 6))
    with pytest.raises(ValueError, match="crop"):
        D.draw_crop_flip(cfg, (5, 7), 1, np.random.default_rng(0))
    ok = D.PreprocConfig(crop=(4, 4))
    draws = D.center_crop(ok, (5, 7), ds.n)
    with pytest.raises(ValueError, match="mean"):
        D.preprocess(ds.pixels, ds.labels, np.zeros((3, 4, 4), np.float32), ok, draws)


def test_flip_probability_is_about_half():
    draws = D.draw_crop_flip(D.PreprocConfig(crop=(2, 2)), (4, 4), 10000,
                             np.random.default_rng(0))
    assert 0.47 < draws.flip.mean() < 0.53
    assert set(draws.top.tolist()) == {0, 1, 2}


# -- sharded streams ---------------------------------------------------------

def test_single_shard_is_full_permutation():
    ds = random_dataset(11, n=40)
    batches = list(D.batch_stream(ds, 8, (0, 1), epoch_seed=3))
    pos = np.concatenate([b.positions for b in batches])
    assert np.array_equal(pos, np.arange(40))
    assert [b.sequence_index for b in batches] == list(range(5))
    perm = D.epoch_permutation(40, 3, 0)
    assert np.array_equal(np.concatenate([b.images for b in batches]), ds.pixels[perm])


@settings(max_examples=25, deadline=None)
@given(n=st.integers(8, 120), batch=st.integers(1, 8), K=st.integers(1, 4),
       seed=st.integers(0, 100))
def test_shards_partition_the_epoch(n, batch, K, seed):
    ds = random_dataset(seed, n=n)
    if n < batch * K:
        with pytest.raises(ValueError):
            next(D.batch_stream(ds, batch, (0, K), seed))
        return
    single = np.concatenate([b.positions for b in D.batch_stream(ds, batch * K, (0, 1), seed)])
    shards = [np.concatenate([b.positions for b in D.batch_stream(ds, batch, (k, K), seed)])
              for k in range(K)]
    joined = np.concatenate(shards)
    assert len(set(joined.tolist())) == len(joined)
    assert sorted(joined.tolist()) == sorted(single.tolist())
    assert n - len(joined) < batch * K


def test_sharding_arithmetic():
    ds = random_dataset(12, n=1000, h=2, w=2)
    per_shard = [list(D.batch_stream(ds, 128, (k, 2))) for k in range(2)]
    assert [len(s) for s in per_shard] == [3, 3]
    assert sum(len(b.labels) for b in per_shard[0]) == 384
    used = sum(len(b.labels) for s in per_shard for b in s)
    assert (used, 1000 - used) == (768, 232)


def test_endless_stream_crosses_epochs():
    ds = random_dataset(13, n=20)
    batches = list(D.endless_stream(ds, 8, limit=5))
    assert [b.epoch for b in batches] == [0, 0, 1, 1, 2]
    assert [b.sequence_index for b in batches] == list(range(5))


# -- loaders -----------------------------------------------------------------

def slow_load(delay):
    def load(x):
        time.sleep(delay)
        return x
    return load


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_prefetch_matches_inline(seed):
    ds = D.generate_synthetic(96, 4, 3, 12, 12, seed=seed)
    mean = D.compute_mean_image(ds)
    cfg = D.PreprocConfig(crop=(8, 8), seed=seed)
    stream = lambda: D.endless_stream(ds, 16, (0, 1), seed, limit=15)
    load = lambda raw: D.prepare_batch(raw, ds.n, mean, cfg)
    inline = list(D.InlineLoader(stream(), load))
    with D.spawn_prefetcher(stream(), mean, cfg, ds.n) as handle:
        fetched = list(iter(lambda: D.next_batch(handle), None))
    assert len(inline) == len(fetched) == 15
    for a, b in zip(inline, fetched):
        assert a.sequence_index == b.sequence_index
        assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)


def test_prefetch_is_at_most_one_ahead():
    with D.Prefetcher(range(30), lambda x: x) as handle:
        time.sleep(0.05)
        got = []
        for _ in range(30):
            got.append(handle.next_batch())
            time.sleep(0.002)
        assert handle.next_batch() is None
    assert got == list(range(30))
    assert handle.max_ahead == 1


def test_prefetch_overlaps_load_and_compute():
    delay, count = 0.05, 20

    def consume(loader):
        t0 = time.perf_counter()
        while loader.next_batch() is not None:
            time.sleep(delay)
        return time.perf_counter() - t0

    inline = consume(D.InlineLoader(range(count), slow_load(delay)))
    with D.Prefetcher(range(count), slow_load(delay)) as handle:
        piped = consume(handle)
    assert inline / piped >= 1.6
    assert delay <= piped / count <= delay * 1.25


def test_close_and_drop_stop_the_worker():
    base = D.live_loader_count()
    handle = D.Prefetcher(iter(range(10**9)), lambda x: x)
    handle.next_batch()
    assert D.live_loader_count() == base + 1
    handle.close()
    assert not handle.alive
    assert wait_for(lambda: D.live_loader_count() == base)

    handle = D.Prefetcher(iter(range(10**9)), slow_load(0.01))
    handle.next_batch()
    del handle
    gc.collect()
    assert wait_for(lambda: D.live_loader_count() == base)


def test_loader_failure_reaches_consumer():
    def load(x):
        if x == 3:
            raise OSError("disk went away")
        return x

    with D.Prefetcher(range(10), load) as handle:
        assert [handle.next_batch() for _ in range(3)] == [0, 1, 2]
        with pytest.raises(D.LoaderError, match="disk went away") as info:
            handle.next_batch()
        assert isinstance(info.value.__cause__, OSError)


def test_handoff_does_not_copy():
    payloads = [np.zeros(1000, np.float32) for _ in range(3)]
    with D.Prefetcher(payloads, lambda x: x) as handle:
        for p in payloads:
            assert handle.next_batch() is p
