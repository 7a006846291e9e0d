"""Data-parallel training harness.

Workers are threads holding shared-nothing model replicas. Training follows
the synchronized data-parallel contract: parameters are broadcast from rank 0
once, then each step every worker computes gradients on its own shard batch,
the gradients are averaged by a ring all-reduce, and all workers apply the
identical update, so replicas stay bit-identical forever.

The ring all-reduce exchanges W equal chunks around a fixed ring in
2(W-1) phases: W-1 scatter-reduce phases, after which rank r holds the fully
reduced chunk (r+1) mod W, then W-1 all-gather phases that circulate the
reduced chunks. Each chunk is accumulated along a single deterministic path,
so every rank ends with bitwise-identical results regardless of scheduling.

A simulation mode runs the identical phase schedule sequentially and counts
message traffic instead of wall-clock, for exact reproducible tests of the
collective's structure.
"""

from __future__ import annotations

import hashlib
import os
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "WorkerGroup",
    "make_shards",
    "broadcast_params",
    "ring_allreduce",
    "RingCost",
    "simulate_ring_cost",
    "parallel_map",
    "distributed_train",
    "train_single",
    "DistTrainResult",
    "speedup_benchmark",
    "BenchmarkReport",
    "format_benchmark_table",
    "REFERENCE_SPEEDUPS",
]

# Published speedups of the same augmentation workload on an 8-GPU cluster,
# recorded in benchmark reports for comparison only; they are hardware
# specific and not reproducible on desk machines.
REFERENCE_SPEEDUPS = {1: 1.0, 2: 1.93, 4: 3.23, 6: 4.45, 8: 5.09}


def make_shards(n_items: int, world_size: int) -> list:
    """Round-robin shard assignment: disjoint and covering."""
    return [list(range(r, n_items, world_size)) for r in range(world_size)]


@dataclass
class WorkerGroup:
    world_size: int
    seed: int = 0
    shards: list | None = None

    def __post_init__(self):
        if self.world_size < 1:
            raise ValueError(f"world size must be >= 1, got {self.world_size}")
        if self.shards is not None:
            if len(self.shards) != self.world_size:
                raise ValueError(
                    f"{len(self.shards)} shards for {self.world_size} workers"
                )
            seen = [i for s in self.shards for i in s]
            if len(seen) != len(set(seen)):
                raise ValueError("shards are not disjoint")

    def shard_for(self, rank: int) -> list:
        if self.shards is None:
            raise ValueError("group has no shard assignment")
        return self.shards[rank]


def broadcast_params(group: WorkerGroup, params: np.ndarray) -> list:
    """Give every worker a bit-identical copy of rank 0's parameters."""
    params = np.asarray(params, dtype=np.float64)
    return [params.copy() for _ in range(group.world_size)]


def _ring_schedule(w: int):
    """Yield (phase-kind, step, send-chunk-of-rank, recv-chunk-of-rank) for
    the 2(w-1) phases; chunk ids are functions of the rank r."""
    for s in range(w - 1):
        yield ("reduce", s, lambda r, s=s: (r - s) % w, lambda r, s=s: (r - 1 - s) % w)
    for s in range(w - 1):
        yield ("gather", s, lambda r, s=s: (r + 1 - s) % w, lambda r, s=s: (r - s) % w)


def _prepare_buffers(vectors):
    w = len(vectors)
    vecs = [np.asarray(v, dtype=np.float64).ravel() for v in vectors]
    n = vecs[0].size
    for r, v in enumerate(vecs):
        if v.size != n:
            raise ValueError(
                f"gradient length mismatch: rank 0 has {n}, rank {r} has {v.size}"
            )
    k = -(-n // w)  # ceil; the last chunk is zero-padded
    bufs = [np.concatenate([v, np.zeros(w * k - n)]) for v in vecs]
    return bufs, n, k


def ring_allreduce(vectors, mode: str = "thread") -> list:
    """Average one equal-length vector per rank; every rank receives the
    bitwise-identical mean. `mode` is "thread" (real concurrent workers) or
    "simulate" (same schedule run sequentially)."""
    w = len(vectors)
    if w == 0:
        raise ValueError("ring_allreduce: no ranks")
    if w == 1:
        return [np.asarray(vectors[0], dtype=np.float64).copy()]
    bufs, n, k = _prepare_buffers(vectors)
    chunk = lambda i: slice(i * k, (i + 1) * k)

    if mode == "simulate":
        for kind, s, send_of, recv_of in _ring_schedule(w):
            msgs = [bufs[r][chunk(send_of(r))].copy() for r in range(w)]
            for r in range(w):
                incoming = msgs[(r - 1) % w]
                tgt = chunk(recv_of(r))
                if kind == "reduce":
                    bufs[r][tgt] += incoming
                else:
                    bufs[r][tgt] = incoming
            if kind == "reduce" and s == w - 2:
                for r in range(w):
                    bufs[r][chunk((r + 1) % w)] /= w
    elif mode == "thread":
        rightward = [queue.Queue(maxsize=1) for _ in range(w)]
        errors = []

        def worker(r):
            try:
                for kind, s, send_of, recv_of in _ring_schedule(w):
                    rightward[r].put(bufs[r][chunk(send_of(r))].copy())
                    incoming = rightward[(r - 1) % w].get()
                    tgt = chunk(recv_of(r))
                    if kind == "reduce":
                        bufs[r][tgt] += incoming
                    else:
                        bufs[r][tgt] = incoming
                    if kind == "reduce" and s == w - 2:
                        bufs[r][chunk((r + 1) % w)] /= w
            except BaseException as e:  # abort the group on any worker failure
                errors.append((r, e))

        threads = [threading.Thread(target=worker, args=(r,)) for r in range(w)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            rank, err = errors[0]
            raise RuntimeError(f"ring all-reduce failed on rank {rank}: {err}") from err
    else:
        raise ValueError(f"unknown mode {mode!r}")

    return [b[:n].copy() for b in bufs]


@dataclass(frozen=True)
class RingCost:
    world_size: int
    phases: int
    chunk_elements: int
    per_rank_elements_sent: int
    total_elements_sent: int


def simulate_ring_cost(n_elements: int, world_size: int) -> RingCost:
    """Step-counting cost model of the collective: 2(W-1) phases, one chunk
    of ceil(n/W) elements sent per rank per phase."""
    w = world_size
    if w == 1:
        return RingCost(1, 0, 0, 0, 0)
    k = -(-n_elements // w)
    phases = 2 * (w - 1)
    return RingCost(w, phases, k, phases * k, w * phases * k)


def parallel_map(fn, items, workers: int) -> list:
    """Apply fn to every item using `workers` threads; results keep the input
    order regardless of scheduling. Worker exceptions abort the whole map."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    results = [None] * len(items)
    work = queue.Queue()
    for idx, it in enumerate(items):
        work.put((idx, it))
    errors = []

    def run():
        while True:
            try:
                idx, it = work.get_nowait()
            except queue.Empty:
                return
            try:
                results[idx] = fn(it)
            except BaseException as e:
                errors.append(e)
                return

    threads = [threading.Thread(target=run) for _ in range(min(workers, len(items)))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return results


# ------------------------------------------------------- distributed SGD


@dataclass
class DistTrainResult:
    params: np.ndarray
    losses: list
    replica_checksums: list

    @property
    def replicas_identical(self) -> bool:
        return len(set(self.replica_checksums)) == 1


def _checksum(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def _batch_indices(shard, step: int, batch_size: int) -> list:
    if not shard:
        return []
    b = min(batch_size, len(shard))
    return [shard[(step * b + i) % len(shard)] for i in range(b)]


def train_single(task, shard, steps: int):
    """Plain single-process reference trainer: same gradient step and update
    rule, no collective."""
    params = task.init_params()
    velocity = np.zeros_like(params)
    losses = []
    for step in range(steps):
        batch = _batch_indices(shard, step, task.batch_size)
        loss, grad = task.grad(params, batch, step)
        if not np.isfinite(loss):
            raise RuntimeError(f"training diverged (loss {loss}) at step {step}")
        params, velocity = task.apply(params, velocity, grad)
        losses.append(float(loss))
    return params, losses


def distributed_train(group: WorkerGroup, task, steps: int, mode: str = "thread") -> DistTrainResult:
    """Synchronized data-parallel training: broadcast once, then per step
    compute per-shard gradients, ring-average them, and apply the identical
    update on every replica."""
    if group.shards is None:
        raise ValueError("worker group needs shard assignments for training")
    w = group.world_size
    replicas = broadcast_params(group, task.init_params())
    velocities = [np.zeros_like(replicas[0]) for _ in range(w)]
    losses = []
    for step in range(steps):
        def grad_of(rank):
            batch = _batch_indices(group.shards[rank], step, task.batch_size)
            return task.grad(replicas[rank], batch, step)

        outs = parallel_map(grad_of, range(w), w if mode == "thread" else 1)
        step_losses = [l for l, _ in outs]
        if any(not np.isfinite(l) for l in step_losses):
            raise RuntimeError(
                f"training diverged (losses {step_losses}) at step {step}"
            )
        avg = ring_allreduce([g for _, g in outs], mode=mode)
        for r in range(w):
            replicas[r], velocities[r] = task.apply(replicas[r], velocities[r], avg[r])
        losses.append(float(np.mean(step_losses)))
    return DistTrainResult(
        params=replicas[0],
        losses=losses,
        replica_checksums=[_checksum(p) for p in replicas],
    )


# ------------------------------------------------------------- benchmark


@dataclass
class BenchmarkReport:
    rows: list                      # (workers, seconds, speedup)
    baseline_seconds: float
    hardware_threads: int
    under_provisioned: list = field(default_factory=list)
    reference: dict = field(default_factory=lambda: dict(REFERENCE_SPEEDUPS))


_FORKED_TASKS = None


def _run_forked_task(i):
    _FORKED_TASKS[i]()
    return None


def _run_tasks(tasks, workers: int, mode: str):
    if workers <= 1 or mode == "thread":
        parallel_map(lambda f: f(), tasks, workers)
        return
    # Process workers: CPython threads cannot speed up this CPU-bound
    # workload (the interpreter lock serializes them), so the benchmark
    # fans out over forked processes that inherit the task list.
    global _FORKED_TASKS
    import multiprocessing as mp
    ctx = mp.get_context("fork")
    _FORKED_TASKS = tasks
    try:
        with ctx.Pool(workers) as pool:
            pool.map(_run_forked_task, range(len(tasks)))
    finally:
        _FORKED_TASKS = None


def speedup_benchmark(make_tasks, worker_counts, repeats: int = 1,
                      mode: str = "process") -> BenchmarkReport:
    """Run the workload produced by make_tasks() at each worker count and
    report wall-clock speedups S = T_1 / T_W. Worker counts above the
    machine's hardware threads are flagged in the report, not rejected."""
    hardware = os.cpu_count() or 1
    counts = sorted(set(int(w) for w in worker_counts))
    if not counts or counts[0] < 1:
        raise ValueError(f"bad worker counts {worker_counts}")
    times = {}
    for w in counts if 1 in counts else [1] + counts:
        best = float("inf")
        for _ in range(repeats):
            tasks = make_tasks()
            t0 = time.perf_counter()
            _run_tasks(tasks, w, mode)
            best = min(best, time.perf_counter() - t0)
        times[w] = best
    base = times[1]
    rows = [(w, times[w], base / times[w]) for w in counts]
    return BenchmarkReport(
        rows=rows,
        baseline_seconds=base,
        hardware_threads=hardware,
        under_provisioned=[w for w in counts if w > hardware],
    )


def format_benchmark_table(report: BenchmarkReport) -> str:
    """Text table with columns W, T_p, T_s, S; the sequential time column
    repeats the single-worker time on every row. Reference rows from
    published cluster runs are appended for comparison (hardware-specific,
    not measured here)."""
    lines = [
        f"# hardware threads: {report.hardware_threads}",
        "W\tT_p(s)\tT_s(s)\tS",
    ]
    for w, seconds, speedup in report.rows:
        flag = "  (exceeds hardware threads)" if w in report.under_provisioned else ""
        lines.append(
            f"{w}\t{seconds:.4f}\t{report.baseline_seconds:.4f}\t{speedup:.2f}{flag}"
        )
    lines.append("# reference (8-GPU cluster, for comparison only):")
    for w, s in sorted(report.reference.items()):
        lines.append(f"# {w}\t-\t-\t{s:.2f}")
    return "\n".join(lines)
