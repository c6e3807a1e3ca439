import itertools
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_source
from greedy_oed.bench import synthetic_overlap
from greedy_oed.errors import AllInfeasible, WorkerFailure
from greedy_oed.kstore import KStore, write_k
from greedy_oed.parallel import (
    LOCAL_RESULT,
    Worker,
    pipelined_evaluate,
    reduce_argmax,
    run_parallel_greedy,
    shard,
)
from greedy_oed.selector import greedy_select

# --- reduce_argmax ---


def test_reduce_max():
    assert reduce_argmax([(1.0, 5), (2.0, 3)]) == (2.0, 3)


def test_reduce_tie_lowest_index():
    assert reduce_argmax([(2.0, 7), (2.0, 3)]) == (2.0, 3)


def test_reduce_skips_infeasible():
    assert reduce_argmax([(-np.inf, -1), (0.5, 4), (np.nan, 2)]) == (0.5, 4)
    with pytest.raises(AllInfeasible):
        reduce_argmax([(-np.inf, -1), (-np.inf, -1)])


@given(
    st.lists(st.tuples(st.sampled_from([-1.0, 0.0, 1.5, 2.0, 3.25]), st.integers(0, 20)), min_size=1, max_size=12),
    st.randoms(use_true_random=False),
)
def test_reduce_order_independent(items, rnd):
    shuffled = list(items)
    rnd.shuffle(shuffled)
    assert reduce_argmax(items) == reduce_argmax(shuffled)
    # folding pairwise in any grouping gives the same answer
    mid = len(items) // 2
    if mid:
        partial = [reduce_argmax(items[:mid]), reduce_argmax(items[mid:])]
        assert reduce_argmax(partial) == reduce_argmax(items)


# --- sharding ---


@pytest.mark.parametrize("n, w", [(10, 3), (7, 8), (64, 4), (1, 1)])
def test_shards_partition_balanced(n, w):
    parts = shard(list(range(n)), w)
    assert len(parts) == w
    assert sorted(itertools.chain.from_iterable(parts)) == list(range(n))
    sizes = [len(p) for p in parts]
    assert max(sizes) - min(sizes) <= 1


# --- run_parallel_greedy ---


def test_single_worker_matches_greedy(wave_k):
    _, ref = greedy_select(wave_k, budget=12)
    _, trace = run_parallel_greedy(wave_k, budget=12, n_workers=1)
    assert trace.selection_rows() == ref.selection_rows()


@pytest.mark.parametrize("pipeline", [True, False])
def test_worker_count_invariance(wave_k, pipeline):
    _, ref = greedy_select(wave_k, budget=12)
    for w in (1, 2, 4, 8):
        state, trace = run_parallel_greedy(wave_k, budget=12, n_workers=w, seed=3, pipeline=pipeline)
        assert state.chosen == ref.chosen
        assert trace.selection_rows() == ref.selection_rows()


def test_seed_does_not_change_selection(wave_k):
    a, _ = run_parallel_greedy(wave_k, budget=6, n_workers=3, seed=0)
    b, _ = run_parallel_greedy(wave_k, budget=6, n_workers=3, seed=99)
    assert a.chosen == b.chosen


def test_replicas_reconstruct_and_agree(wave_k):
    nt = wave_k.n_steps

    def check(k, workers):
        S = workers[0].state.chosen
        idx = (np.asarray(S)[:, None] * nt + np.arange(nt)).ravel()
        K_S = wave_k.matrix[np.ix_(idx, idx)]
        for w in workers:
            assert np.abs(w.state.factor.reconstruct() - K_S).max() <= 1e-6 * np.abs(K_S).max()

    run_parallel_greedy(wave_k, budget=8, n_workers=4, check_replicas=True, on_round=check)


def test_message_bytes_independent_of_k_and_nt():
    for nt in (2, 6):
        src = random_source(12, nt, nt)
        for w in (1, 3):
            _, trace = run_parallel_greedy(src, budget=6, n_workers=w)
            assert trace.message_bytes == [w * LOCAL_RESULT.size] * 6


def test_worker_failure_reports_round():
    class Flaky:
        def __init__(self, inner, fail_round):
            self.inner, self.fail_round = inner, fail_round
            self.n_sensors, self.n_steps, self.noise_diag = inner.n_sensors, inner.n_steps, inner.noise_diag

        def read_block(self, i, j, out):
            self.inner.read_block(i, j, out)

        def read_test_column(self, S, s, out):
            if len(S) + 1 >= self.fail_round:
                raise OSError("disk went away")
            self.inner.read_test_column(S, s, out)

    with pytest.raises(WorkerFailure) as exc:
        run_parallel_greedy(Flaky(random_source(6, 2, 0), 3), budget=4, n_workers=2)
    assert exc.value.round_index == 3
    assert isinstance(exc.value.cause, OSError)


def test_parallel_from_store(tmp_path, wave_k):
    path = tmp_path / "k.kbf"
    write_k(wave_k, path)
    ref, _ = greedy_select(wave_k, budget=12)
    with KStore(path) as store:
        state, _ = run_parallel_greedy(store, budget=12, n_workers=4)
    assert state.chosen == ref.chosen


def test_parallel_precision_f32(wave_k):
    ref, _ = greedy_select(wave_k, budget=12)
    state, _ = run_parallel_greedy(wave_k, budget=12, n_workers=2, precision="f32")
    assert state.chosen == ref.chosen


def test_invalid_worker_count(wave_k):
    with pytest.raises(ValueError):
        run_parallel_greedy(wave_k, budget=1, n_workers=0)


# --- pipelined_evaluate ---


def _worker_at_round(src, chosen, read_delay=0.0, compute_delay=0.0):
    w = Worker(0, src, len(chosen) + 1, read_delay=read_delay, compute_delay=compute_delay)
    for s in chosen:
        w.recompute_and_commit(s)
    return w


def test_pipeline_matches_sequential_bitwise():
    src = random_source(20, 3, 1)
    w = _worker_at_round(src, [4, 11, 7])
    try:
        cands = [c for c in range(20) if c not in (4, 11, 7)]
        a = pipelined_evaluate(w, cands, pipeline=True)
        b = pipelined_evaluate(w, cands, pipeline=False)
        assert (a.score, a.sensor) == (b.score, b.sensor)
        assert LOCAL_RESULT.pack(a.score, a.sensor) == LOCAL_RESULT.pack(b.score, b.sensor)
    finally:
        w.close()


def test_pipeline_keeps_winner_buffers():
    src = random_source(10, 2, 2)
    w = _worker_at_round(src, [0])
    try:
        res = pipelined_evaluate(w, list(range(1, 10)), pipeline=True)
        d_again = w.recompute_and_commit(res.sensor)
        assert w.scorer.selection_score(res.sensor, d_again) == res.score
    finally:
        w.close()


def test_single_candidate_no_overlap():
    src = random_source(3, 2, 3)
    w = _worker_at_round(src, [], read_delay=0.01, compute_delay=0.01)
    try:
        res = pipelined_evaluate(w, [1], pipeline=True)
    finally:
        w.close()
    t = res.timing
    assert t.overlap < 0.15
    assert t.wall_time == pytest.approx(t.io_time + t.compute_time, rel=0.3)


def test_empty_shard():
    src = random_source(3, 2, 3)
    w = _worker_at_round(src, [])
    try:
        res = pipelined_evaluate(w, [], pipeline=True)
    finally:
        w.close()
    assert res.sensor == -1


def test_overlap_with_synthetic_delays():
    t0 = time.perf_counter()
    out = synthetic_overlap(n_candidates=100, io_ms=5.0, compute_ms=5.0)
    assert out["best"] == out["best_sequential"]
    assert out["ratio"] <= 0.6, out
    assert out["overlap"] > 0.3
    assert time.perf_counter() - t0 < 10
