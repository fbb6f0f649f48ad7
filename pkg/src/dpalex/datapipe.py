"""Datasets on disk, preprocessing, sharded batch streams and the double-buffered loader.

The loader runs in a background thread. It prepares batch t+1 while the
trainer works on batch t and never gets further ahead than that: a
credit is handed back each time the trainer takes a batch, and the
loader needs a credit before it starts the next one.
"""
from __future__ import annotations

import functools
import itertools
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional

import numpy as np

from .tensor import DTYPE

DATASET_MAGIC = b"PDS1"
DATASET_VERSION = 1
MEAN_MAGIC = b"PDM1"
_DS_HEADER = struct.Struct("<4sIIIIII")
_MEAN_HEADER = struct.Struct("<4sIII")


class DatasetFormatError(ValueError):
    """A dataset or mean-image file is malformed."""


class LoaderError(RuntimeError):
    """The background loader failed; ``__cause__`` holds the original error."""


# -- datasets ----------------------------------------------------------------

@dataclass
class RawDataset:
    pixels: np.ndarray   # uint8 (n, c, h, w)
    labels: np.ndarray   # uint32 (n,)
    classes: int

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 4:
            raise ValueError(f"pixels must be uint8 (n, c, h, w), got {self.pixels.dtype} "
                             f"{self.pixels.shape}")
        if self.labels.shape != (self.pixels.shape[0],):
            raise ValueError(f"labels shape {self.labels.shape} does not match "
                             f"{self.pixels.shape[0]} images")
        if self.labels.size and int(self.labels.max()) >= self.classes:
            raise ValueError(f"label {int(self.labels.max())} >= classes {self.classes}")

    @property
    def n(self) -> int:
        return self.pixels.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    def __eq__(self, other):
        if not isinstance(other, RawDataset):
            return NotImplemented
        return (self.classes == other.classes
                and self.pixels.shape == other.pixels.shape
                and np.array_equal(self.pixels, other.pixels)
                and np.array_equal(self.labels, other.labels))


def encode_dataset(ds: RawDataset) -> bytes:
    n, c, h, w = ds.pixels.shape
    header = _DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, c, h, w, ds.classes)
    return (header + np.ascontiguousarray(ds.pixels).tobytes()
            + ds.labels.astype("<u4").tobytes())


def decode_dataset(buf: bytes) -> RawDataset:
    if len(buf) < _DS_HEADER.size:
        raise DatasetFormatError(f"header: file length {len(buf)} shorter than "
                                 f"{_DS_HEADER.size}-byte header")
    magic, version, n, c, h, w, classes = _DS_HEADER.unpack_from(buf)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"magic: got {magic!r}, expected {DATASET_MAGIC!r}")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"version: got {version}, expected {DATASET_VERSION}")
    npix = n * c * h * w
    expected = _DS_HEADER.size + npix + 4 * n
    if len(buf) != expected:
        raise DatasetFormatError(f"length: header declares n={n} ({c}x{h}x{w}) needing "
                                 f"{expected} bytes, file has {len(buf)}")
    pixels = np.frombuffer(buf, np.uint8, npix, _DS_HEADER.size).reshape(n, c, h, w)
    labels = np.frombuffer(buf, "<u4", n, _DS_HEADER.size + npix).astype(np.uint32)
    if n and int(labels.max()) >= classes:
        raise DatasetFormatError(f"labels: label {int(labels.max())} >= classes {classes}")
    return RawDataset(pixels.copy(), labels, classes)


def write_dataset(path, ds: RawDataset) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def read_dataset(path) -> RawDataset:
    return decode_dataset(Path(path).read_bytes())


def encode_mean(mean: np.ndarray) -> bytes:
    c, h, w = mean.shape
    return _MEAN_HEADER.pack(MEAN_MAGIC, c, h, w) + mean.astype("<f4").tobytes()


def decode_mean(buf: bytes) -> np.ndarray:
    if len(buf) < _MEAN_HEADER.size:
        raise DatasetFormatError(f"header: mean file length {len(buf)} too short")
    magic, c, h, w = _MEAN_HEADER.unpack_from(buf)
    if magic != MEAN_MAGIC:
        raise DatasetFormatError(f"magic: got {magic!r}, expected {MEAN_MAGIC!r}")
    expected = _MEAN_HEADER.size + 4 * c * h * w
    if len(buf) != expected:
        raise DatasetFormatError(f"length: mean {c}x{h}x{w} needs {expected} bytes, got {len(buf)}")
    return np.frombuffer(buf, "<f4", c * h * w, _MEAN_HEADER.size).astype(DTYPE).reshape(c, h, w)


def write_mean(path, mean: np.ndarray) -> None:
    Path(path).write_bytes(encode_mean(mean))


def read_mean(path) -> np.ndarray:
    return decode_mean(Path(path).read_bytes())


def generate_synthetic(n: int, classes: int, c: int, h: int, w: int, seed: int,
                       split: int = 0, noise: float = 40.0) -> RawDataset:
    """Class-conditional blob images.

    Every class gets a fixed mean image: a flat colour plus a few Gaussian
    blobs. Samples add per-pixel Gaussian noise and clamp to [0, 255].
    Class means depend only on ``seed``; ``split`` selects an independent
    sample draw from the same classes (e.g. a validation set).
    """
    if n < 1 or classes < 1:
        raise ValueError(f"need n >= 1 and classes >= 1, got n={n}, classes={classes}")
    rng = np.random.default_rng([seed, 0])
    yy, xx = np.mgrid[0:h, 0:w]
    means = np.empty((classes, c, h, w))
    for k in range(classes):
        img = np.broadcast_to(rng.uniform(40, 215, size=(c, 1, 1)), (c, h, w)).copy()
        for _ in range(3):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            sigma = rng.uniform(0.15, 0.3) * min(h, w)
            amp = rng.uniform(-60, 60, size=(c, 1, 1))
            img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        means[k] = img

    sample_rng = np.random.default_rng([seed, 1, split])
    labels = np.arange(n) % classes
    sample_rng.shuffle(labels)
    pixels = means[labels] + sample_rng.normal(0, noise, size=(n, c, h, w))
    pixels = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    return RawDataset(pixels, labels.astype(np.uint32), classes)


def compute_mean_image(ds: RawDataset) -> np.ndarray:
    return ds.pixels.mean(axis=0, dtype=np.float64).astype(DTYPE)


# -- preprocessing -----------------------------------------------------------

@dataclass(frozen=True)
class PreprocConfig:
    """Crop size, augmentation seed and the post-subtraction pixel scale.

    ``scale`` brings mean-subtracted 0..255 pixels to roughly unit range so
    fan-in scaled initialisation works with the default learning rate.
    """
    crop: tuple[int, int] = (32, 32)
    seed: int = 0
    flip_prob: float = 0.5
    scale: float = 1 / 64


@dataclass(frozen=True)
class CropFlip:
    """Per-image augmentation decisions: crop offsets and flip flags."""
    top: np.ndarray
    left: np.ndarray
    flip: np.ndarray


@dataclass
class Minibatch:
    images: np.ndarray          # float32 (b, c, ch, cw)
    labels: np.ndarray          # int64 (b,)
    sequence_index: int


@dataclass
class RawBatch:
    images: np.ndarray          # uint8 (b, c, h, w)
    labels: np.ndarray
    epoch: int
    positions: np.ndarray       # indices into the epoch permutation
    sequence_index: int


def _check_crop(image_hw, crop):
    h, w = image_hw
    ch, cw = crop
    if not (1 <= ch <= h and 1 <= cw <= w):
        raise ValueError(f"crop {ch}x{cw} does not fit inside {h}x{w} images")


def draw_crop_flip(config: PreprocConfig, image_hw: tuple[int, int], count: int,
                   rng: np.random.Generator) -> CropFlip:
    _check_crop(image_hw, config.crop)
    h, w = image_hw
    ch, cw = config.crop
    top = rng.integers(0, h - ch + 1, size=count)
    left = rng.integers(0, w - cw + 1, size=count)
    flip = rng.random(count) < config.flip_prob
    return CropFlip(top, left, flip)


@functools.lru_cache(maxsize=8)
def epoch_draws(config: PreprocConfig, image_hw: tuple[int, int], n: int, epoch: int) -> CropFlip:
    """Decisions for every position of an epoch's permutation.

    Keyed by position rather than by batch, so a sample is augmented the
    same way no matter how the epoch is split across replicas.
    """
    return draw_crop_flip(config, image_hw, n, np.random.default_rng([config.seed, epoch, 2]))


def center_crop(config: PreprocConfig, image_hw: tuple[int, int], count: int) -> CropFlip:
    _check_crop(image_hw, config.crop)
    top = np.full(count, (image_hw[0] - config.crop[0]) // 2)
    left = np.full(count, (image_hw[1] - config.crop[1]) // 2)
    return CropFlip(top, left, np.zeros(count, dtype=bool))


def preprocess(images: np.ndarray, labels: np.ndarray, mean: np.ndarray,
               config: PreprocConfig, draws: CropFlip, sequence_index: int = 0) -> Minibatch:
    """float32 conversion, full-size mean subtraction and scaling, crop, then horizontal flip."""
    b, c, h, w = images.shape
    _check_crop((h, w), config.crop)
    if mean.shape != (c, h, w):
        raise ValueError(f"mean shape {mean.shape} does not match images {(c, h, w)}")
    if len(draws.top) != b:
        raise ValueError(f"{len(draws.top)} augmentation draws for {b} images")
    ch, cw = config.crop
    centered = images.astype(DTYPE) - mean
    if config.scale != 1:
        centered *= DTYPE(config.scale)
    rows = draws.top[:, None] + np.arange(ch)
    cols = draws.left[:, None] + np.arange(cw)
    cols = np.where(draws.flip[:, None], cols[:, ::-1], cols)
    idx_b = np.arange(b)[:, None, None, None]
    idx_c = np.arange(c)[None, :, None, None]
    out = centered[idx_b, idx_c, rows[:, None, :, None], cols[:, None, None, :]]
    return Minibatch(np.ascontiguousarray(out, dtype=DTYPE),
                     np.asarray(labels, dtype=np.int64), sequence_index)


def flip_horizontal(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1]


def prepare_batch(raw: RawBatch, n: int, mean: np.ndarray, config: PreprocConfig) -> Minibatch:
    """Preprocess a raw batch using its epoch's position-keyed augmentation."""
    hw = raw.images.shape[2:]
    draws = epoch_draws(config, tuple(hw), n, raw.epoch)
    sel = CropFlip(draws.top[raw.positions], draws.left[raw.positions],
                   draws.flip[raw.positions])
    return preprocess(raw.images, raw.labels, mean, config, sel, raw.sequence_index)


# -- sharded streams ---------------------------------------------------------

def epoch_permutation(n: int, epoch_seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([epoch_seed, epoch]).permutation(n)


def batch_stream(ds: RawDataset, batch_size: int, shard: tuple[int, int] = (0, 1),
                 epoch_seed: int = 0, epoch: int = 0, start_index: int = 0) -> Iterator[RawBatch]:
    """One epoch of raw batches for shard ``k`` of ``K``.

    The permuted epoch is cut into global rounds of ``batch_size * K``
    images; shard k takes slice k of each round, which is the same as
    taking every K-th batch of size ``batch_size``. A trailing partial
    round is dropped.
    """
    k, K = shard
    if not 0 <= k < K:
        raise ValueError(f"shard index {k} outside [0, {K})")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if ds.n < batch_size * K:
        raise ValueError(f"dataset of {ds.n} images cannot fill one round of "
                         f"{K} x {batch_size}")
    perm = epoch_permutation(ds.n, epoch_seed, epoch)
    rounds = ds.n // (batch_size * K)
    for r in range(rounds):
        start = (r * K + k) * batch_size
        pos = np.arange(start, start + batch_size)
        idx = perm[pos]
        yield RawBatch(ds.pixels[idx], ds.labels[idx].astype(np.int64), epoch, pos,
                       start_index + r)


def endless_stream(ds: RawDataset, batch_size: int, shard: tuple[int, int] = (0, 1),
                   epoch_seed: int = 0, limit: Optional[int] = None) -> Iterator[RawBatch]:
    """Consecutive epochs of :func:`batch_stream`, optionally truncated to ``limit`` batches."""
    def gen():
        seq = 0
        for epoch in itertools.count():
            for raw in batch_stream(ds, batch_size, shard, epoch_seed, epoch, seq):
                yield raw
            seq = raw.sequence_index + 1
    it = gen()
    return itertools.islice(it, limit) if limit is not None else it


# -- loaders -----------------------------------------------------------------

_live_lock = threading.Lock()
_live_loaders = 0


def live_loader_count() -> int:
    """Number of loader worker threads currently running."""
    with _live_lock:
        return _live_loaders


def _bump(delta: int) -> None:
    global _live_loaders
    with _live_lock:
        _live_loaders += delta


class _Failure:
    def __init__(self, exc: BaseException):
        self.exc = exc


_END = object()


class InlineLoader:
    """Loads each batch on demand in the caller's thread."""

    def __init__(self, stream: Iterable, load: Callable):
        self._it = iter(stream)
        self._load = load

    def next_batch(self):
        raw = next(self._it, _END)
        if raw is _END:
            return None
        return self._load(raw)

    def __iter__(self):
        return iter(self.next_batch, None)

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _Worker:
    """State shared between a Prefetcher handle and its thread.

    Kept separate so the thread never references the handle, which lets a
    dropped handle be collected and stop its worker.
    """

    def __init__(self, stream, load):
        self.it = iter(stream)
        self.load = load
        self.slot = None
        self.full = threading.Condition()
        self.credit = threading.Semaphore(1)
        self.stop = threading.Event()
        self.ahead = 0
        self.max_ahead = 0

    def run(self):
        try:
            while True:
                while not self.credit.acquire(timeout=0.05):
                    if self.stop.is_set():
                        return
                if self.stop.is_set():
                    return
                try:
                    raw = next(self.it, _END)
                    item = _END if raw is _END else self.load(raw)
                except BaseException as exc:  # delivered to the consumer
                    item = _Failure(exc)
                with self.full:
                    self.slot = item
                    if item is not _END and not isinstance(item, _Failure):
                        self.ahead += 1
                        self.max_ahead = max(self.max_ahead, self.ahead)
                    self.full.notify()
                if item is _END or isinstance(item, _Failure):
                    return
        finally:
            _bump(-1)

    def halt(self):
        self.stop.set()
        self.credit.release()


class Prefetcher:
    """Double-buffered loader: one worker thread, a handoff slot of capacity one.

    The worker needs a credit to start preparing a batch and the consumer
    returns one each time it takes a batch, so at most one finished batch
    ever waits in the slot (``max_ahead`` records the high-water mark).
    Dropping or closing the handle stops the worker.
    """

    def __init__(self, stream: Iterable, load: Callable, name: str = "loader"):
        self._w = _Worker(stream, load)
        self._done = False
        self._thread = threading.Thread(target=self._w.run, name=name, daemon=True)
        _bump(+1)
        self._thread.start()

    @property
    def max_ahead(self) -> int:
        return self._w.max_ahead

    def next_batch(self):
        """Block for the prepared batch; ``None`` at end of stream."""
        if self._done:
            return None
        w = self._w
        with w.full:
            while w.slot is None:
                w.full.wait()
            item, w.slot = w.slot, None
            if item is not _END and not isinstance(item, _Failure):
                w.ahead -= 1
        if item is _END:
            self._done = True
            return None
        if isinstance(item, _Failure):
            self._done = True
            raise LoaderError(f"loader failed: {item.exc!r}") from item.exc
        w.credit.release()
        return item

    def __iter__(self):
        return iter(self.next_batch, None)

    def close(self, timeout: float = 5.0):
        self._w.halt()
        if self._thread is not threading.current_thread():
            self._thread.join(timeout)

    @property
    def alive(self) -> bool:
        return self._thread.is_alive()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        self._w.halt()


def spawn_prefetcher(stream: Iterable[RawBatch], mean: np.ndarray, config: PreprocConfig,
                     n: int) -> Prefetcher:
    """Start a loader preparing batches of ``stream``; ``n`` is the dataset size."""
    return Prefetcher(stream, functools.partial(prepare_batch, n=n, mean=mean, config=config))


def next_batch(handle) -> Optional[Minibatch]:
    return handle.next_batch()
