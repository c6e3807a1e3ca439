"""Sharded, pipelined greedy selection on a pool of in-process workers.

Every round:

1. surviving candidates (kept in one seeded global shuffle order) are split
   into contiguous, balanced shards, one per worker;
2. each worker scores its shard, prefetching the next candidate's test
   column into a spare buffer while the current one is scored, and keeps
   only its local best ``(score, sensor)``;
3. the local bests pass through a byte-counting channel and are folded by
   :func:`reduce_argmax` (max score, ties to the lowest sensor index);
4. every worker re-reads and re-scores the winner and appends it to its own
   replica of the factor. Factor contents never cross the channel.
"""

from __future__ import annotations

import math
import struct
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import AllInfeasible, InfeasibleRound, NotPositiveDefinite, WorkerFailure
from .selector import SchurScorer, SelectionTrace, TraceRecord, _candidate_list, log

LOCAL_RESULT = struct.Struct("<dq")  # score, sensor index (-1: nothing feasible)


@dataclass
class WorkerTiming:
    round: int
    worker: int
    io_time: float
    compute_time: float
    wall_time: float
    n_candidates: int

    @property
    def overlap(self) -> float:
        busy = self.io_time + self.compute_time
        return max(0.0, 1.0 - self.wall_time / busy) if busy > 0 else 0.0


@dataclass
class LocalResult:
    score: float
    sensor: int
    n_infeasible: int
    timing: WorkerTiming


def reduce_argmax(locals_):
    """Fold ``(score, sensor)`` pairs: highest score, ties to lowest sensor.

    The ordering is total, so the fold is associative and commutative.
    Entries with ``sensor < 0`` or a non-finite score are infeasible.
    """
    feasible = [(float(d), int(s)) for d, s in locals_ if s >= 0 and not math.isnan(d) and d > -math.inf]
    if not feasible:
        raise AllInfeasible("no worker reported a feasible candidate")
    best = feasible[0]
    for d, s in feasible[1:]:
        if d > best[0] or (d == best[0] and s < best[1]):
            best = (d, s)
    return best


class ByteCountingChannel:
    """Stand-in for an allreduce: serializes what each worker contributes and
    counts the bytes."""

    def __init__(self):
        self.bytes_per_round: list[int] = []

    def allgather(self, payloads: list[bytes]) -> list[bytes]:
        self.bytes_per_round.append(sum(len(p) for p in payloads))
        return list(payloads)


class Worker:
    """One worker: a scorer holding a factor replica plus a prefetch thread.

    ``read_delay`` and ``compute_delay`` (seconds) add artificial latency to
    every load and every evaluation; they exist for overlap benchmarks.
    """

    def __init__(self, wid: int, source, budget: int, precision="f64", objective_mode="normalized",
                 read_delay: float = 0.0, compute_delay: float = 0.0):
        self.wid = wid
        self.scorer = SchurScorer(source, budget, precision, objective_mode, n_slots=3)
        self.read_delay = read_delay
        self.compute_delay = compute_delay
        self._prefetch = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"prefetch-{wid}")

    @property
    def state(self):
        return self.scorer.state

    def close(self) -> None:
        self._prefetch.shutdown(wait=True)

    def load(self, s: int, slot) -> float:
        t0 = time.perf_counter()
        if self.read_delay:
            time.sleep(self.read_delay)
        self.scorer.load(s, slot)
        return time.perf_counter() - t0

    def compute(self, slot) -> float:
        if self.compute_delay:
            time.sleep(self.compute_delay)
        return self.scorer.evaluate(slot)

    def recompute_and_commit(self, s: int) -> float:
        slot = self.scorer.slots[0]
        self.scorer.load(s, slot)
        d = self.scorer.evaluate(slot)
        self.scorer.commit(slot)
        return d


def pipelined_evaluate(worker: Worker, candidates, pipeline: bool = True, round_index: int = 0) -> LocalResult:
    """Score ``candidates`` on ``worker`` and return the local best.

    With ``pipeline`` the next candidate is read on the prefetch thread while
    the current one is scored. Buffers of non-best candidates are recycled.
    """
    scorer = worker.scorer
    slots = scorer.slots
    candidates = list(candidates)
    t_start = time.perf_counter()
    io = compute = 0.0
    best_slot = None
    best_score, best_s, n_inf = -math.inf, -1, 0

    def spare(*busy):
        return next(x for x in slots if all(x is not b for b in busy))

    cur = slots[0]
    pending = worker._prefetch.submit(worker.load, candidates[0], cur) if pipeline and candidates else None
    for idx, s in enumerate(candidates):
        if pipeline:
            io += pending.result()
            nxt = None
            if idx + 1 < len(candidates):
                nxt = spare(cur, best_slot)
                pending = worker._prefetch.submit(worker.load, candidates[idx + 1], nxt)
        else:
            io += worker.load(s, cur)
        t0 = time.perf_counter()
        try:
            d = worker.compute(cur)
        except NotPositiveDefinite as exc:
            n_inf += 1
            log.warning("worker %d: candidate %d infeasible (%s)", worker.wid, s, exc)
            d = None
        compute += time.perf_counter() - t0
        if d is not None:
            score = scorer.selection_score(s, d)
            if score > best_score or (score == best_score and s < best_s):
                best_score, best_s, best_slot = score, s, cur
        if pipeline:
            cur = nxt
        elif best_slot is cur:
            cur = spare(cur)
    wall = time.perf_counter() - t_start
    timing = WorkerTiming(round_index, worker.wid, io, compute, wall, len(candidates))
    return LocalResult(best_score, best_s, n_inf, timing)


def shard(items, n_workers: int) -> list[list[int]]:
    """Contiguous shards whose sizes differ by at most one."""
    return [part.tolist() for part in np.array_split(np.asarray(items, dtype=np.int64), n_workers)]


def run_parallel_greedy(
    source,
    candidates=None,
    budget: int = 1,
    n_workers: int = 1,
    seed: int = 0,
    *,
    pipeline: bool = True,
    precision="f64",
    objective_mode: str = "normalized",
    check_replicas: bool = False,
    on_round=None,
    read_delay: float = 0.0,
    compute_delay: float = 0.0,
):
    """Greedy selection sharded over ``n_workers``; returns ``(state, trace)``.

    The chosen sequence equals :func:`~greedy_oed.selector.greedy_select` for
    every worker count. ``trace.worker_timings`` and ``trace.message_bytes``
    carry the per-round timing and the bytes exchanged. ``on_round(k,
    workers)`` is called after each round's factor update.
    """
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    C = _candidate_list(source, candidates)
    if budget > len(C):
        raise ValueError(f"budget {budget} exceeds {len(C)} candidates")
    order = np.random.default_rng(seed).permutation(C).tolist()
    workers = [
        Worker(w, source, budget, precision, objective_mode, read_delay, compute_delay) for w in range(n_workers)
    ]
    channel = ByteCountingChannel()
    trace = SelectionTrace(objective_mode)
    try:
        with ThreadPoolExecutor(max_workers=n_workers, thread_name_prefix="oed-worker") as pool:
            for k in range(1, budget + 1):
                t0 = time.perf_counter()
                chosen = set(workers[0].state.chosen)
                remaining = [c for c in order if c not in chosen]
                shards = shard(remaining, n_workers)
                futures = [pool.submit(pipelined_evaluate, w, sh, pipeline, k) for w, sh in zip(workers, shards)]
                results = _gather(futures, k)
                payloads = [LOCAL_RESULT.pack(r.score, r.sensor) for r in results]
                decoded = [LOCAL_RESULT.unpack(p) for p in channel.allgather(payloads)]
                try:
                    best_score, s_star = reduce_argmax(decoded)
                except AllInfeasible:
                    if k == 1:
                        raise InfeasibleRound(k) from None
                    warnings.warn(f"stopping after {k - 1} sensors: no feasible candidate in round {k}")
                    break
                _gather([pool.submit(w.recompute_and_commit, s_star) for w in workers], k)
                if check_replicas:
                    _check_replicas(workers, k)
                if on_round is not None:
                    on_round(k, workers)
                wall = time.perf_counter() - t0
                state = workers[0].state
                trace.records.append(
                    TraceRecord(
                        k=k,
                        chosen_index=s_star,
                        objective=state.value(objective_mode),
                        gain=best_score,
                        n_evaluated=len(remaining),
                        n_infeasible=sum(r.n_infeasible for r in results),
                        wall_time=wall,
                        mean_candidate_time=wall / max(len(remaining), 1),
                    )
                )
                trace.worker_timings.extend(r.timing for r in results)
    finally:
        for w in workers:
            w.close()
    trace.message_bytes = channel.bytes_per_round
    return workers[0].state, trace


def _gather(futures, round_index: int):
    out = []
    for wid, fut in enumerate(futures):
        try:
            out.append(fut.result())
        except Exception as exc:
            raise WorkerFailure(round_index, wid, exc) from exc
    return out


def _check_replicas(workers, round_index: int, atol: float = 1e-9) -> None:
    ref = workers[0].state.factor.view()
    for w in workers[1:]:
        other = w.state.factor.view()
        if other.shape != ref.shape or not np.allclose(other, ref, rtol=0, atol=atol):
            raise WorkerFailure(round_index, w.wid, RuntimeError("factor replica diverged"))


def evaluate_round(workers: list[Worker], candidates, pipeline: bool = True, round_index: int = 0):
    """One sharded scoring pass without committing; used by the benchmarks."""
    shards = shard(candidates, len(workers))
    with ThreadPoolExecutor(max_workers=len(workers)) as pool:
        futures = [pool.submit(pipelined_evaluate, w, sh, pipeline, round_index) for w, sh in zip(workers, shards)]
        results = _gather(futures, round_index)
    return reduce_argmax([(r.score, r.sensor) for r in results]), results
