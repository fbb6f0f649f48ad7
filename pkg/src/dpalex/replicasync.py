"""Exchange-and-average replica synchronization and the replicated training loop.

Each of K replica threads owns a full parameter state (weights, biases,
momentum). Every iteration each replica updates on its own shard batch,
posts its state to every peer's mailbox, waits until all have posted,
averages the K states in replica-index order, and waits again until all
have read their mailboxes before the mailboxes are reused. Because
every replica sums the same values in the same order, all states are
bit-identical after each round.

Two transports carry a state to a peer:

* ``DIRECT`` hands over a reference to the sender's freshly flattened
  vector (no copy).
* ``STAGED`` serializes to the PPS1 byte layout, copies the bytes into
  the peer's mailbox and deserializes there.
"""
from __future__ import annotations

import enum
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import datapipe as D
from . import model as M


class TransportMode(enum.Enum):
    DIRECT = "direct"
    STAGED = "staged"


class ProtocolError(RuntimeError):
    """An exchange round could not complete; ``missing`` lists absent replicas."""

    def __init__(self, message: str, missing: tuple[int, ...] = ()):
        super().__init__(message)
        self.missing = missing


class ReplicaError(RuntimeError):
    """A replica failed and the group was aborted; ``__cause__`` is the original error."""

    def __init__(self, message: str, replica: int):
        super().__init__(message)
        self.replica = replica


class _Barrier:
    """Reusable barrier that knows who has arrived, for useful timeout errors."""

    def __init__(self, parties: int, name: str):
        self.parties = parties
        self.name = name
        self._cond = threading.Condition()
        self._arrived: set[int] = set()
        self._generation = 0
        self._broken: Optional[BaseException] = None

    def wait(self, rid: int, timeout: float) -> None:
        with self._cond:
            if self._broken is not None:
                raise ProtocolError(f"{self.name} barrier aborted") from self._broken
            gen = self._generation
            self._arrived.add(rid)
            if len(self._arrived) == self.parties:
                self._arrived = set()
                self._generation += 1
                self._cond.notify_all()
                return
            deadline = time.monotonic() + timeout
            while self._generation == gen and self._broken is None:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    missing = tuple(sorted(set(range(self.parties)) - self._arrived))
                    err = ProtocolError(
                        f"replica(s) {list(missing)} did not reach the {self.name} barrier "
                        f"of round {gen} within {timeout:g} s", missing)
                    self._broken = err
                    self._cond.notify_all()
                    raise err
                self._cond.wait(remaining)
            if self._generation == gen:
                raise ProtocolError(f"{self.name} barrier aborted") from self._broken

    def abort(self, reason: BaseException) -> None:
        with self._cond:
            if self._broken is None:
                self._broken = reason
            self._cond.notify_all()


@dataclass
class SyncReport:
    rounds: int = 0
    bytes_per_round: int = 0
    mean_latency: float = 0.0
    max_latency: float = 0.0


class ExchangeGroup:
    """K replicas, a K x K grid of single-slot mailboxes and a two-phase barrier.

    ``mailboxes[dst][src]`` is written only by ``src`` and read only by
    ``dst``. ``generation[rid]`` counts completed rounds per replica.
    """

    def __init__(self, workers: int, transport: TransportMode = TransportMode.DIRECT,
                 timeout: float = 30.0):
        if workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        self.workers = workers
        self.transport = TransportMode(transport)
        self.timeout = timeout
        self.mailboxes: list[list] = [[None] * workers for _ in range(workers)]
        self.generation = [0] * workers
        self._sent = _Barrier(workers, "send")
        self._ack = _Barrier(workers, "ack")
        self._latencies: list[float] = []
        self._state_bytes = 0

    def abort(self, reason: BaseException) -> None:
        self._sent.abort(reason)
        self._ack.abort(reason)

    def report(self) -> SyncReport:
        lat = self._latencies
        return SyncReport(
            rounds=self.generation[0],
            bytes_per_round=(self.workers - 1) * self._state_bytes,
            mean_latency=float(np.mean(lat)) if lat else 0.0,
            max_latency=float(np.max(lat)) if lat else 0.0,
        )

    def exchange(self, local: M.ParamState, rid: int) -> None:
        K = self.workers
        if not 0 <= rid < K:
            raise ValueError(f"replica id {rid} outside [0, {K})")
        start = time.perf_counter()
        if rid == 0 and not self._state_bytes:
            self._state_bytes = 12 + 4 * local.size
        if K == 1:
            self.generation[rid] += 1
            self._latencies.append(time.perf_counter() - start)
            return

        own = M.flat_vector(local)
        if self.transport is TransportMode.STAGED:
            wire = M.flatten_state(local)
            for dst in range(K):
                if dst != rid:
                    self.mailboxes[dst][rid] = bytearray(wire)
        else:
            for dst in range(K):
                if dst != rid:
                    self.mailboxes[dst][rid] = own
        self._sent.wait(rid, self.timeout)

        inbox = self.mailboxes[rid]
        acc = None
        for src in range(K):
            if src == rid:
                vec = own
            elif self.transport is TransportMode.STAGED:
                vec = M.flat_vector(M.unflatten_like(inbox[src], local))
            else:
                vec = inbox[src]
            if acc is None:
                acc = vec.copy()
            else:
                acc += vec
        acc /= np.float32(K)
        for src in range(K):
            inbox[src] = None
        # counted before the ack so that every counter has moved once anyone leaves
        self.generation[rid] += 1
        # peers may still be reading ``own``; nothing is written until all have read
        self._ack.wait(rid, self.timeout)

        M.load_flat_vector(local, acc)
        if rid == 0:
            self._latencies.append(time.perf_counter() - start)


def exchange_and_average(local: M.ParamState, rid: int, group: ExchangeGroup) -> None:
    """Replace ``local`` with the elementwise mean of all replicas' states."""
    group.exchange(local, rid)


def staged_roundtrip(state: M.ParamState) -> M.ParamState:
    """Serialize, copy and deserialize a state, as the staged transport does."""
    return M.unflatten_like(bytes(bytearray(M.flatten_state(state))), state)


# -- replicated training -----------------------------------------------------

@dataclass(frozen=True)
class WorkloadStub:
    """Injected delays standing in for the network and the loader.

    Delays are per global batch, in seconds; with K replicas each replica
    sleeps ``delay / K`` since it handles ``1/K`` of the batch.
    ``compute_work`` adds real CPU work: that many passes of single-threaded
    elementwise math over a 64K-element buffer per global batch, split
    evenly over replicas. Sleeps overlap on any machine; the work only
    speeds up with spare cores.
    ``setup_delay`` is spent by every replica before the timed loop starts.
    """
    compute_delay: float = 0.0
    load_delay: float = 0.0
    setup_delay: float = 0.0
    compute_work: int = 0

    def __post_init__(self):
        if min(self.compute_delay, self.load_delay, self.setup_delay, self.compute_work) < 0:
            raise ValueError(f"delays must be >= 0: {self}")

    def compute(self, workers: int) -> None:
        if self.compute_delay:
            time.sleep(self.compute_delay / workers)
        if self.compute_work:
            buf = np.linspace(0, 1, 1 << 16)
            for _ in range(self.compute_work // workers):
                np.sqrt(buf + 1.0, out=buf)


@dataclass
class TrainResult:
    params: M.ParamState
    losses: list[float]
    report: SyncReport
    seconds: float = 0.0
    stamps: list[float] = field(default_factory=list, repr=False)


Observer = Callable[[str, int, int, M.ParamState], None]


class ReplicatedRun:
    """K replica threads training one network with per-step state averaging.

    :meth:`setup` spawns the replicas (parameter init, loaders, stub setup)
    and returns once all are ready; :meth:`run` releases them and times the
    loop from release until the last timed iteration finishes on replica 0.
    ``observer(event, rid, iteration, params)`` is called with events
    ``"start"`` and ``"synced"`` from inside replica threads.
    """

    def __init__(self, spec: M.NetworkSpec, dataset: D.RawDataset, workers: int,
                 hyper: M.Hyper, iterations: int, *, batch_size: int,
                 parallel_loading: bool = True,
                 transport: TransportMode = TransportMode.DIRECT, seed: int = 0,
                 preproc: Optional[D.PreprocConfig] = None,
                 mean: Optional[np.ndarray] = None, warmup: int = 0,
                 stub: Optional[WorkloadStub] = None, observer: Optional[Observer] = None,
                 timeout: float = 30.0, init_std: Optional[float] = None):
        if workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        if batch_size % workers:
            raise ValueError(f"global batch {batch_size} is not divisible by {workers} workers")
        if dataset.n < batch_size:
            raise ValueError(f"dataset of {dataset.n} images is smaller than one global "
                             f"batch of {batch_size}")
        self.spec = spec
        self.dataset = dataset
        self.workers = workers
        self.hyper = hyper
        self.iterations = iterations
        self.warmup = warmup
        self.batch_size = batch_size
        self.per_replica = batch_size // workers
        self.parallel_loading = parallel_loading
        self.seed = seed
        self.preproc = preproc or D.PreprocConfig(crop=spec.input_shape[1:], seed=seed)
        if stub is None and (dataset.image_shape[0], *self.preproc.crop) != spec.input_shape:
            raise ValueError(f"crop {self.preproc.crop} of {dataset.image_shape} images does "
                             f"not match network input {spec.input_shape}")
        self.mean = D.compute_mean_image(dataset) if mean is None else mean
        self.stub = stub
        self.observer = observer
        self.init_std = init_std
        self.group = ExchangeGroup(workers, transport, timeout)

        total = warmup + iterations
        self._losses = np.zeros((total, workers))
        self._stamps: list[float] = []
        self._params: list[Optional[M.ParamState]] = [None] * workers
        self._failure: Optional[tuple[int, BaseException]] = None
        self._fail_lock = threading.Lock()
        self._ready = threading.Barrier(workers + 1)
        self._go = threading.Event()
        self._threads: list[threading.Thread] = []
        self._t0 = 0.0

    def _fail(self, rid: int, exc: BaseException) -> None:
        with self._fail_lock:
            if self._failure is None:
                self._failure = (rid, exc)
        self.group.abort(exc)
        self._ready.abort()
        self._go.set()

    def _loader(self, rid: int):
        stream = D.endless_stream(self.dataset, self.per_replica, (rid, self.workers),
                                  self.seed, limit=self.warmup + self.iterations)
        if self.stub is not None:
            delay = self.stub.load_delay / self.workers

            def load(raw):
                time.sleep(delay)
                return raw
        else:
            n, mean, cfg = self.dataset.n, self.mean, self.preproc

            def load(raw):
                return D.prepare_batch(raw, n, mean, cfg)
        cls = D.Prefetcher if self.parallel_loading else D.InlineLoader
        return cls(stream, load)

    def _replica(self, rid: int) -> None:
        loader = None
        try:
            params = M.init_params(self.spec, self.seed, self.init_std)
            self._params[rid] = params
            loader = self._loader(rid)
            if self.stub is not None and self.stub.setup_delay:
                time.sleep(self.stub.setup_delay)
            self._ready.wait()
            self._go.wait()
            if self._failure is not None:
                return
            for it in range(self.warmup + self.iterations):
                if self.observer:
                    self.observer("start", rid, it, params)
                batch = loader.next_batch()
                if batch is None:
                    raise RuntimeError(f"batch stream ended early at iteration {it}")
                if self.stub is not None:
                    self.stub.compute(self.workers)
                    loss = 0.0
                else:
                    loss, _, grads = M.forward_backward(self.spec, params, batch.images,
                                                        batch.labels)
                    M.sgd_momentum_step(params, grads, self.hyper)
                exchange_and_average(params, rid, self.group)
                self._losses[it, rid] = loss
                if rid == 0:
                    self._stamps.append(time.perf_counter())
                if self.observer:
                    self.observer("synced", rid, it, params)
        except threading.BrokenBarrierError:
            pass  # another replica failed during setup
        except BaseException as exc:
            self._fail(rid, exc)
        finally:
            if loader is not None:
                loader.close()

    def setup(self) -> "ReplicatedRun":
        for rid in range(self.workers):
            t = threading.Thread(target=self._replica, args=(rid,), name=f"replica-{rid}",
                                 daemon=True)
            self._threads.append(t)
            t.start()
        try:
            self._ready.wait()
        except threading.BrokenBarrierError:
            self._join()
            self._raise_failure()
            raise
        return self

    def _join(self):
        for t in self._threads:
            t.join()

    def _raise_failure(self):
        if self._failure is not None:
            rid, exc = self._failure
            raise ReplicaError(f"replica {rid} failed: {exc!r}", rid) from exc

    def run(self) -> TrainResult:
        if not self._threads:
            self.setup()
        self._t0 = time.perf_counter()
        self._go.set()
        self._join()
        self._raise_failure()
        start = self._stamps[self.warmup - 1] if self.warmup else self._t0
        seconds = self._stamps[-1] - start if self.iterations else 0.0
        # mean of equal-size replica losses is the loss over the union batch
        losses = self._losses[self.warmup:].mean(axis=1).tolist()
        return TrainResult(self._params[0], losses, self.group.report(), seconds,
                           list(self._stamps))


def train_replicated(spec: M.NetworkSpec, dataset: D.RawDataset, workers: int,
                     hyper: M.Hyper, iterations: int, parallel_loading: bool = True,
                     transport: TransportMode = TransportMode.DIRECT, seed: int = 0, *,
                     batch_size: int, **kwargs) -> TrainResult:
    """Train ``workers`` replicas for ``iterations`` steps of global batch ``batch_size``.

    Returns replica 0's final state (identical on every replica), the
    per-iteration loss over the whole global batch, and the sync report.
    """
    return ReplicatedRun(spec, dataset, workers, hyper, iterations, batch_size=batch_size,
                         parallel_loading=parallel_loading, transport=transport, seed=seed,
                         **kwargs).run()
