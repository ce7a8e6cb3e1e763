"""Label-partitioned training: one independent GAN per class, recombined as a
prior-weighted mixture.

Workers share nothing but their inputs. Each one builds its pair from a seed
derived from ``(base_seed, class_id)``, trains only on its own shard and hands
back a serialized checkpoint, so serial, threaded and multi-process execution
give bitwise-identical results.
"""

from __future__ import annotations

import concurrent.futures as cf
import multiprocessing
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import pair_from_bytes, pair_to_bytes
from .data import SHAPE_KINDS, Dataset, shape_image
from .gan import GanPair, StepReport, TrainConfig, build_pair, generate, train_gan

MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class ClassShard:
    class_id: int
    indices: np.ndarray

    def __len__(self):
        return len(self.indices)


@dataclass
class ClassPrior:
    counts: np.ndarray
    probabilities: np.ndarray

    @classmethod
    def from_counts(cls, counts) -> "ClassPrior":
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 1 or counts.size == 0 or counts.min() < 0 or counts.sum() == 0:
            raise ValueError("prior counts must be a non-empty, non-negative vector with a positive sum")
        return cls(counts, counts / counts.sum())

    @property
    def K(self) -> int:
        return self.counts.size


class PartitionError(ValueError):
    pass


def partition_by_label(labels, K: int) -> list[ClassShard]:
    """Split row indices by label into K disjoint, covering shards."""
    labels = np.asarray(labels)
    if K < 1:
        raise PartitionError("K must be >= 1")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        bad = labels[(labels < 0) | (labels >= K)][0]
        raise PartitionError(f"label {bad} outside [0, {K})")
    order = np.argsort(labels, kind="stable")
    counts = np.bincount(labels, minlength=K)
    shards, start = [], 0
    for k in range(K):
        if counts[k] == 0:
            raise PartitionError(f"class {k} has no samples")
        shards.append(ClassShard(k, order[start : start + counts[k]]))
        start += counts[k]
    return shards


def estimate_priors(shards: list[ClassShard]) -> ClassPrior:
    return ClassPrior.from_counts([len(s) for s in shards])


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(base_seed: int, class_id: int) -> int:
    """Worker seed; distinct for distinct class ids below 2**32 (splitmix64 is a bijection)."""
    return splitmix64(((base_seed & 0xFFFFFFFF) << 32) | (class_id & 0xFFFFFFFF))


def physical_cores() -> int:
    """Usable physical cores, capped by the PARTGAN_THREADS environment variable."""
    try:
        import psutil

        cores = psutil.cpu_count(logical=False) or os.cpu_count() or 1
    except ImportError:
        cores = os.cpu_count() or 1
    if hasattr(os, "sched_getaffinity"):
        cores = min(cores, len(os.sched_getaffinity(0)))
    cap = os.environ.get("PARTGAN_THREADS")
    if cap:
        cores = min(cores, max(1, int(cap)))
    return max(1, cores)


@dataclass
class WorkerConfig:
    """Everything one worker needs besides its data.

    ``class_id`` is None for the single-model baselines; ``d_y`` > 0 makes
    the pair conditional on the data labels.
    """

    class_id: int | None
    seed: int
    train: TrainConfig
    d_y: int = 0


@dataclass
class WorkerResult:
    class_id: int | None
    seed: int
    checkpoint: bytes
    reports: list[StepReport]
    duration: float
    started: float
    finished: float

    def pair(self) -> GanPair:
        return pair_from_bytes(self.checkpoint)[0]


@dataclass
class TrainingRun:
    workers: list[WorkerResult]
    priors: ClassPrior | None
    duration: float
    failures: dict = field(default_factory=dict)

    @property
    def max_worker_duration(self) -> float:
        return max(w.duration for w in self.workers)

    def pairs(self) -> list[GanPair]:
        return [w.pair() for w in self.workers]


class WorkerError(RuntimeError):
    """One or more workers failed; ``partial`` holds the completed ones."""

    def __init__(self, failures: dict, partial: TrainingRun):
        self.failures = failures
        self.partial = partial
        detail = "; ".join(f"class {k}: {v}" for k, v in failures.items())
        super().__init__(f"{len(failures)} worker(s) failed ({detail}); {len(partial.workers)} completed")


def run_worker(wc: WorkerConfig, images: np.ndarray, labels: np.ndarray | None = None) -> WorkerResult:
    """Train one pair on ``images`` (its shard) and return the serialized result."""
    from threadpoolctl import threadpool_limits

    started = time.time()
    t0 = time.perf_counter()
    with threadpool_limits(1):
        pair = build_pair(wc.train, images.shape[1:], wc.d_y, wc.seed)
        rng = np.random.default_rng([wc.seed, 1])
        reports = train_gan(pair, images, labels if wc.d_y else None, wc.train.epochs, wc.train.batch_size, rng)
    # class ids live in the manifest; a checkpoint depends only on seed, config and data
    ckpt = pair_to_bytes(pair, {"seed": wc.seed})
    return WorkerResult(wc.class_id, wc.seed, ckpt, reports, time.perf_counter() - t0, started, time.time())


def _executor(backend: str, workers: int):
    if backend == "thread":
        return cf.ThreadPoolExecutor(max_workers=workers)
    if backend == "process":
        return cf.ProcessPoolExecutor(max_workers=workers, mp_context=multiprocessing.get_context("spawn"))
    raise ValueError(f"unknown backend {backend!r}")


def run_workers(jobs: list[tuple], backend: str = "process", workers: int | None = None) -> TrainingRun:
    """Run ``(WorkerConfig, images, labels)`` jobs and collect a TrainingRun.

    The first failure cancels jobs that have not started; running ones are
    allowed to finish and are reported alongside the failure.
    """
    workers = physical_cores() if workers is None else max(1, workers)
    t0 = time.perf_counter()
    results, failures = [], {}
    if backend == "serial":
        for wc, images, labels in jobs:
            try:
                results.append(run_worker(wc, images, labels))
            except Exception as exc:  # noqa: BLE001 - reported with class attribution
                failures[wc.class_id] = f"{type(exc).__name__}: {exc}"
                break
    else:
        with _executor(backend, min(workers, len(jobs))) as pool:
            futures = {pool.submit(run_worker, wc, images, labels): wc for wc, images, labels in jobs}
            for fut in cf.as_completed(futures):
                wc = futures[fut]
                if fut.cancelled():
                    continue
                exc = fut.exception()
                if exc is None:
                    results.append(fut.result())
                else:
                    failures[wc.class_id] = f"{type(exc).__name__}: {exc}"
                    for other in futures:
                        other.cancel()
    results.sort(key=lambda r: -1 if r.class_id is None else r.class_id)
    run = TrainingRun(results, None, time.perf_counter() - t0, failures)
    if failures:
        raise WorkerError(failures, run)
    return run


def train_distributed(
    dataset: Dataset,
    shards: list[ClassShard],
    priors: ClassPrior,
    config: TrainConfig,
    base_seed: int = 0,
    backend: str = "process",
    workers: int | None = None,
    worker_configs: list[WorkerConfig] | None = None,
) -> TrainingRun:
    """Train one unconditional pair per shard, concurrently and independently."""
    if worker_configs is None:
        worker_configs = [WorkerConfig(s.class_id, derive_seed(base_seed, s.class_id), config) for s in shards]
    if len(worker_configs) != len(shards):
        raise ValueError("need exactly one worker config per shard")
    jobs = [(wc, dataset.images[s.indices], None) for wc, s in zip(worker_configs, shards)]
    run = run_workers(jobs, backend, workers)
    run.priors = priors
    return run


def train_single(
    dataset: Dataset, config: TrainConfig, conditional: bool, base_seed: int = 0, backend: str = "serial"
) -> TrainingRun:
    """Baseline: one pair over the whole dataset, optionally label-conditional."""
    wc = WorkerConfig(None, derive_seed(base_seed, 0), config, dataset.K if conditional else 0)
    run = run_workers([(wc, dataset.images, dataset.labels)], backend, 1)
    run.priors = estimate_priors(partition_by_label(dataset.labels, dataset.K))
    return run


def stratified_classes(probabilities, n: int) -> np.ndarray:
    """Deterministic class sequence whose every prefix tracks the priors.

    Smooth weighted round-robin: uniform priors give 0, 1, ..., K-1, 0, 1, ...
    """
    p = np.asarray(probabilities, dtype=np.float64)
    credit = np.zeros(p.size)
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        credit += p
        k = int(np.argmax(credit))
        credit[k] -= 1.0
        out[i] = k
    return out


def mixture_sample(pairs: list[GanPair], priors: ClassPrior, n: int, rng, stratified: bool = False):
    """Draw ``n`` samples from the prior-weighted mixture of per-class generators.

    Returns ``(samples, class_ids)``. Each class is drawn from Categorical
    (priors), or from :func:`stratified_classes` when ``stratified``. With a
    single pair no class draw is made, so the result equals
    ``generate(pairs[0], ...)`` under the same rng.
    """
    K = len(pairs)
    if K < 1:
        raise ValueError("need at least one generator")
    if priors.K != K:
        raise ValueError(f"{priors.K} priors for {K} generators")
    if K == 1:
        classes = np.zeros(n, dtype=np.int64)
    elif stratified:
        classes = stratified_classes(priors.probabilities, n)
    else:
        classes = rng.choice(K, size=n, p=priors.probabilities)
    samples = np.empty((n,) + tuple(pairs[0].sample_shape))
    for k in range(K):
        idx = np.flatnonzero(classes == k)
        if idx.size:
            cls = k if pairs[k].label.conditional else None
            samples[idx] = generate(pairs[k], cls, idx.size, rng)
    return samples, classes


def bench_dataset(K: int, per_class_n: int, image_size: int = 16, seed: int = 0) -> Dataset:
    """Equal-size shape-image classes for scaling runs (kinds repeat past 8)."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(K), per_class_n)
    images = np.stack([shape_image(SHAPE_KINDS[k % len(SHAPE_KINDS)], image_size, rng) for k in labels])
    return Dataset(images[:, None], labels, K)


def bench_weak_scaling(
    K_list,
    per_class_n: int,
    config: TrainConfig,
    image_size: int = 16,
    base_seed: int = 0,
    backend: str = "process",
    workers: int | None = None,
    repeats: int = 1,
) -> list[dict]:
    """Wall-clock of :func:`train_distributed` for each K at fixed per-class workload.

    One row per (K, repeat). ``oversubscribed`` marks K above the pool size.
    """
    pool = physical_cores() if workers is None else workers
    rows = []
    for K in K_list:
        data = bench_dataset(K, per_class_n, image_size, base_seed)
        shards = partition_by_label(data.labels, K)
        priors = estimate_priors(shards)
        for rep in range(repeats):
            t0 = time.perf_counter()
            run = train_distributed(data, shards, priors, config, base_seed, backend, pool)
            wall = time.perf_counter() - t0
            rows.append(
                {
                    "K": K,
                    "repeat": rep,
                    "wall_clock_s": wall,
                    "max_worker_s": run.max_worker_duration,
                    "cores_used": min(K, pool),
                    "oversubscribed": K > pool,
                    "intervals": [(w.started, w.finished) for w in run.workers],
                }
            )
    return rows
