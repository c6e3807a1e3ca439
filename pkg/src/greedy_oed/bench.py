"""Timing harness: per-candidate cost versus k, scaling, and I/O overlap."""

from __future__ import annotations

import csv
import math
import os
import time

import numpy as np

from .linalg import cholesky, logdet_from_factor, square_view
from .lti import DataSpaceHessian, assemble_k, block_indices, make_wave_problem
from .parallel import Worker, evaluate_round, pipelined_evaluate
from .selector import NaiveScorer, SchurScorer, greedy_select

COMPLEXITY_COLUMNS = ("k", "naive_ms", "schur_ms", "naive_std_ms", "schur_std_ms")
SCALING_COLUMNS = ("mode", "workers", "n_candidates", "wall_ms", "efficiency")
ROUND_TIMING_COLUMNS = ("round", "worker", "io_ms", "compute_ms", "wall_ms", "overlap")

# The standard wave benchmark used across tests and the CLI defaults.
STANDARD = dict(n_params=64, n_sensors=32, n_steps=16, wave_speed=4.0, decay=0.05, seed=0)


def standard_benchmark(**overrides) -> DataSpaceHessian:
    cfg = {**STANDARD, **overrides}
    return assemble_k(make_wave_problem(**cfg))


def random_spd_source(n_sensors: int, n_steps: int, seed: int = 0, rank: int | None = None) -> DataSpaceHessian:
    """Well-conditioned random SPD K (``I + G G^T / r``) for timing runs."""
    n = n_sensors * n_steps
    rank = rank or min(n, 64)
    G = np.random.default_rng(seed).standard_normal((n, rank))
    K = G @ G.T / rank
    K[np.diag_indices(n)] += 1.0
    return DataSpaceHessian(K, n_steps, np.ones(n_sensors))


class LowRankPlusIdentity:
    """Block source for ``K = I + G G^T / r`` that forms blocks on demand.

    Used by the complexity sweep so that large ``k`` does not need the dense
    K in memory next to the factor and test buffers.
    """

    def __init__(self, n_sensors: int, n_steps: int, seed: int = 0, rank: int = 64):
        self.n_sensors, self.n_steps = n_sensors, n_steps
        self.G = np.random.default_rng(seed).standard_normal((n_sensors * n_steps, rank)) / math.sqrt(rank)
        self.noise_diag = np.ones(n_sensors)

    def _rows(self, i: int) -> np.ndarray:
        return self.G[i * self.n_steps : (i + 1) * self.n_steps]

    def read_block(self, i: int, j: int, out: np.ndarray) -> None:
        np.matmul(self._rows(i), self._rows(j).T, out=out)
        if i == j:
            out[np.diag_indices(self.n_steps)] += 1.0

    def read_test_column(self, S, s: int, out: np.ndarray) -> None:
        b = self.n_steps
        for r, i in enumerate(S):
            self.read_block(i, s, out[r * b : (r + 1) * b])

    def submatrix(self, S) -> np.ndarray:
        idx = block_indices(S, self.n_steps)
        Gs = self.G[idx]
        K = Gs @ Gs.T
        K[np.diag_indices(len(idx))] += 1.0
        return K


def _physical_memory() -> int:
    try:
        return os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
    except (ValueError, OSError):
        return 1 << 34


def _time_evaluations(scorer, slot, s: int, reps: int) -> tuple[float, float]:
    scorer.load(s, slot)
    scorer.evaluate(slot)  # warm-up
    times = []
    for _ in range(reps):
        scorer.load(s, slot)
        t0 = time.perf_counter()
        scorer.evaluate(slot)
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.mean(times)), 1e3 * float(np.std(times))


def complexity_sweep(n_steps: int = 32, k_max: int = 300, step: int = 30, reps: int = 5, seed: int = 0,
                     memory_limit: int | None = None, ks=None, modes=("naive", "schur")) -> list[dict]:
    """Mean per-candidate scoring time with ``k`` sensors already selected.

    Each row is timed over ``reps`` runs after one warm-up. A mode whose
    buffers would exceed ``memory_limit`` is marked ``None`` (OOM) from that
    ``k`` on, and skipped for larger ``k``.
    """
    ks = list(ks) if ks is not None else list(range(step, k_max + 1, step))
    memory_limit = memory_limit or _physical_memory() // 2
    source = LowRankPlusIdentity(max(ks) + 1, n_steps, seed)
    item = np.dtype(np.float64).itemsize
    oom = {m: False for m in modes}
    rows = []
    for k in ks:
        n = k * n_steps
        cap = n + n_steps
        S = list(range(k))
        row = {"k": k}
        for m in modes:
            row[f"{m}_ms"] = row[f"{m}_std_ms"] = None
        K_S = source.submatrix(S)
        logdet_S = None
        if "schur" in modes and not oom["schur"]:
            if 2 * cap * cap * item > memory_limit:
                oom["schur"] = True
            else:
                sc = SchurScorer(source, k + 1, "f64", "raw")
                sc.state.factor.load(cholesky(K_S))
                sc.state.chosen.extend(S)
                logdet_S = sc.state.factor.logdet()
                row["schur_ms"], row["schur_std_ms"] = _time_evaluations(sc, sc.slots[0], k, reps)
                del sc
        if "naive" in modes and not oom["naive"]:
            if 3 * cap * cap * item > memory_limit:
                oom["naive"] = True
            else:
                nv = NaiveScorer(source, k + 1, "f64", "raw")
                square_view(nv.ks, n)[...] = K_S
                nv.state.chosen.extend(S)
                nv.state.objective = logdet_S if logdet_S is not None else logdet_from_factor(cholesky(K_S))
                del K_S
                row["naive_ms"], row["naive_std_ms"] = _time_evaluations(nv, nv.slot, k, reps)
                del nv
        rows.append(row)
    return rows


def loglog_slope(ks, times, top_decade: bool = True) -> float:
    """Least-squares slope of ``log(time)`` against ``log(k)``.

    With ``top_decade`` only points with ``k >= max(k) / 10`` are used.
    """
    ks = np.asarray(ks, dtype=float)
    times = np.asarray([math.nan if t is None else t for t in times], dtype=float)
    keep = np.isfinite(times) & (ks > 0)
    if top_decade:
        keep &= ks >= ks[keep].max() / 10.0
    if keep.sum() < 2:
        raise ValueError("need at least two timed points to fit a slope")
    return float(np.polyfit(np.log(ks[keep]), np.log(times[keep]), 1)[0])


def check_complexity(rows, schur_range=(1.6, 2.4), naive_range=(2.5, 3.5), faster_from: int = 5) -> list[str]:
    """Failed checks, as messages; an empty list means every check passed."""
    ks = [r["k"] for r in rows]
    failures = []
    for mode, bounds in (("schur", schur_range), ("naive", naive_range)):
        try:
            slope = loglog_slope(ks, [r.get(f"{mode}_ms") for r in rows])
        except ValueError:
            failures.append(f"{mode} curve has fewer than two timed points")
            continue
        if not bounds[0] <= slope <= bounds[1]:
            failures.append(f"{mode} slope {slope:.2f} outside {bounds}")
    for r in rows:
        if r["k"] >= faster_from and r.get("naive_ms") is not None and r.get("schur_ms") is not None:
            if not r["schur_ms"] < r["naive_ms"]:
                failures.append(f"schur not faster than naive at k={r['k']}")
    return failures


def _prepared_workers(source, chosen, n_workers: int, precision="f64") -> list[Worker]:
    budget = len(chosen) + 1
    workers = [Worker(w, source, budget, precision, "raw") for w in range(n_workers)]
    for w in workers:
        for s in chosen:
            w.recompute_and_commit(s)
    return workers


def strong_weak_scaling(source, candidates=None, b_round: int = 8, worker_counts=(1, 2, 4), reps: int = 3,
                        per_worker: int = 64, seed: int = 0, pipeline: bool = True) -> list[dict]:
    """Time one scoring round at iterate ``b_round`` for each worker count.

    Strong scaling keeps the candidate pool fixed. Weak scaling gives every
    worker ``per_worker`` candidates, drawn from the pool by modulo indexing
    after a seeded shuffle. Efficiency is relative to the first worker count.
    """
    worker_counts = sorted(worker_counts)
    state, _ = greedy_select(source, candidates, b_round, objective_mode="raw")
    chosen = list(state.chosen)
    pool = [c for c in (range(source.n_sensors) if candidates is None else sorted(candidates)) if c not in chosen]
    pool = np.random.default_rng(seed).permutation(pool).tolist()
    workers = _prepared_workers(source, chosen, max(worker_counts))
    rows = []
    try:
        for mode in ("strong", "weak"):
            base = None
            for w in worker_counts:
                if mode == "strong":
                    cands = pool
                else:
                    cands = [pool[v % len(pool)] for v in range(per_worker * w)]
                walls = []
                for _ in range(reps):
                    t0 = time.perf_counter()
                    evaluate_round(workers[:w], cands, pipeline)
                    walls.append(time.perf_counter() - t0)
                wall = float(np.median(walls))
                if base is None:
                    base = (w, wall)
                if mode == "strong":
                    eff = base[1] * base[0] / (w * wall)
                else:
                    eff = base[1] / wall
                rows.append({"mode": mode, "workers": w, "n_candidates": len(cands), "wall_ms": 1e3 * wall, "efficiency": eff})
    finally:
        for w in workers:
            w.close()
    return rows


def synthetic_overlap(n_candidates: int = 100, io_ms: float = 5.0, compute_ms: float = 5.0, n_steps: int = 4,
                      seed: int = 0) -> dict:
    """Wall time of one shard with artificial I/O and compute latency,
    pipelined and sequential, plus the pipelined worker's overlap."""
    source = random_spd_source(n_candidates, n_steps, seed)
    out = {}
    for pipeline in (True, False):
        worker = Worker(0, source, 1, read_delay=io_ms / 1e3, compute_delay=compute_ms / 1e3)
        try:
            t0 = time.perf_counter()
            res = pipelined_evaluate(worker, range(n_candidates), pipeline)
            out["pipelined" if pipeline else "sequential"] = time.perf_counter() - t0
            out["best" if pipeline else "best_sequential"] = (res.score, res.sensor)
            if pipeline:
                out["overlap"] = res.timing.overlap
        finally:
            worker.close()
    out["ratio"] = out["pipelined"] / out["sequential"]
    return out


def write_rows(path, rows, columns) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for r in rows:
            # None marks an out-of-memory point; a missing key, a mode not run
            w.writerow(["" if c not in r else "OOM" if r[c] is None else r[c] for c in columns])


def round_timing_rows(trace) -> list[dict]:
    return [
        {
            "round": t.round,
            "worker": t.worker,
            "io_ms": 1e3 * t.io_time,
            "compute_ms": 1e3 * t.compute_time,
            "wall_ms": 1e3 * t.wall_time,
            "overlap": t.overlap,
        }
        for t in trace.worker_timings
    ]
