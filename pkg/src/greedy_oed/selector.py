"""Greedy D-optimal sensor selection with block Schur-complement updates.

The selectors talk to K through a *block source*: any object with
``n_sensors``, ``n_steps``, ``noise_diag`` (per-sensor noise variance or
``None``), ``read_block(i, j, out)`` and ``read_test_column(S, s, out)``.
Both :class:`~greedy_oed.lti.DataSpaceHessian` and
:class:`~greedy_oed.kstore.KStore` qualify.

Two objectives are tracked:

* raw: ``logdet(K_S)``, the quantity the block update accumulates;
* normalized: ``logdet(K_S) - sum_{s in S} logdet(noise block of s)``, the
  expected information gain. It is zero for the empty set, monotone, and
  submodular.

Under isotropic noise both select the same sensors.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InfeasibleRound, NotPositiveDefinite, PropertyViolation, TooLarge
from .linalg import (
    LowerTriangularFactor,
    allocate,
    append_block_column,
    cholesky,
    cholesky_in_place,
    grow_square_in_place,
    logdet_from_factor,
    rect_view,
    schur_complement,
    solve_lower_triangular,
    square_view,
)

log = logging.getLogger(__name__)

PRECISIONS = {"f64": np.dtype(np.float64), "f32": np.dtype(np.float32)}
OBJECTIVE_MODES = ("raw", "normalized")
EXACT_GUARD = 10**6


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return PRECISIONS[precision]
        except KeyError:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}, got {precision!r}") from None
    dtype = np.dtype(precision)
    if dtype not in PRECISIONS.values():
        raise ValueError(f"unsupported precision {dtype}")
    return dtype


def noise_logdets(source) -> np.ndarray | None:
    """Per-sensor ``logdet`` of the noise block, ``n_steps * log(variance)``."""
    if getattr(source, "noise_diag", None) is None:
        return None
    return source.n_steps * np.log(np.asarray(source.noise_diag, dtype=np.float64))


@dataclass
class SelectionState:
    chosen: list[int]
    factor: LowerTriangularFactor
    objective: float = 0.0  # raw logdet(K_S)
    noise_logdet: float = 0.0

    @property
    def normalized_objective(self) -> float:
        return self.objective - self.noise_logdet

    def value(self, mode: str) -> float:
        return self.normalized_objective if mode == "normalized" else self.objective


@dataclass
class TraceRecord:
    k: int
    chosen_index: int
    objective: float
    gain: float
    n_evaluated: int
    n_infeasible: int
    wall_time: float
    mean_candidate_time: float


@dataclass
class SelectionTrace:
    objective_mode: str
    records: list[TraceRecord] = field(default_factory=list)
    # filled by the parallel engine only
    worker_timings: list = field(default_factory=list)
    message_bytes: list[int] = field(default_factory=list)

    CSV_COLUMNS = ("k", "chosen_index", "objective", "gain", "n_evaluated", "wall_ms")

    @property
    def chosen(self) -> list[int]:
        return [r.chosen_index for r in self.records]

    def selection_rows(self) -> list[tuple]:
        """Every field except timings; equal across engines that agree."""
        return [(r.k, r.chosen_index, r.objective, r.gain, r.n_evaluated, r.n_infeasible) for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.CSV_COLUMNS)
            for r in self.records:
                w.writerow([r.k, r.chosen_index, repr(r.objective), repr(r.gain), r.n_evaluated, f"{1e3 * r.wall_time:.6f}"])

    def to_json(self) -> dict:
        return {"objective_mode": self.objective_mode, "records": [asdict(r) for r in self.records]}

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2)


class Slot:
    """Buffers for one candidate in flight: its test column, diagonal block,
    Schur complement (which becomes ``L_M``) and scratch space."""

    def __init__(self, capacity: int, n_steps: int, dtype: np.dtype):
        nt = n_steps
        self.raw_col = allocate(capacity * nt)
        self.raw_kss = allocate(nt * nt)
        if dtype == np.float64:
            self.col, self.kss = self.raw_col, self.raw_kss
        else:
            self.col = allocate(capacity * nt, dtype)
            self.kss = allocate(nt * nt, dtype)
        self.m = allocate(nt * nt, dtype)
        self.work = allocate(nt * nt, dtype)
        self.logwork = allocate(nt, dtype)
        self.sensor = -1
        self.rows = 0
        self.d = math.nan


class SchurScorer:
    """State machine behind greedy selection with block Cholesky updates.

    Holds the growing factor of ``K_S`` and a few candidate slots. ``load``
    does the I/O for a candidate, ``evaluate`` the triangular solve, Schur
    complement and small Cholesky, and ``commit`` the block update. None of
    them allocates.
    """

    def __init__(self, source, budget: int, precision="f64", objective_mode: str = "normalized", n_slots: int = 2):
        if objective_mode not in OBJECTIVE_MODES:
            raise ValueError(f"objective_mode must be one of {OBJECTIVE_MODES}")
        self.source = source
        self.n_steps = source.n_steps
        self.dtype = resolve_dtype(precision)
        self.objective_mode = objective_mode
        self.noise = noise_logdets(source)
        if objective_mode == "normalized" and self.noise is None:
            raise ValueError("normalized objective needs per-sensor noise variances (source.noise_diag)")
        self.budget = budget
        capacity = budget * self.n_steps
        self.state = SelectionState([], LowerTriangularFactor(budget, self.n_steps, self.dtype))
        self.slots = [Slot(capacity, self.n_steps, self.dtype) for _ in range(n_slots)]

    @property
    def chosen(self) -> list[int]:
        return self.state.chosen

    def noise_term(self, s: int) -> float:
        return 0.0 if self.noise is None else float(self.noise[s])

    def selection_score(self, s: int, d: float) -> float:
        return d - self.noise_term(s) if self.objective_mode == "normalized" else d

    def load(self, s: int, slot: Slot) -> None:
        nt = self.n_steps
        rows = len(self.state.chosen) * nt
        raw_col = rect_view(slot.raw_col, rows, nt)
        raw_kss = square_view(slot.raw_kss, nt)
        self.source.read_test_column(self.state.chosen, s, raw_col)
        self.source.read_block(s, s, raw_kss)
        if slot.col is not slot.raw_col:
            np.copyto(rect_view(slot.col, rows, nt), raw_col)
            np.copyto(square_view(slot.kss, nt), raw_kss)
        slot.sensor, slot.rows, slot.d = s, rows, math.nan

    def evaluate(self, slot: Slot) -> float:
        """Score the loaded candidate: ``logdet(M_s)``, the raw marginal gain."""
        nt = self.n_steps
        col = rect_view(slot.col, slot.rows, nt)
        kss = square_view(slot.kss, nt)
        m = square_view(slot.m, nt)
        if slot.rows:
            solve_lower_triangular(self.state.factor.view(), col, out=col, check=False)
            schur_complement(kss, col, out=m, work=square_view(slot.work, nt))
        else:
            np.copyto(m, kss)
        cholesky_in_place(m)
        slot.d = logdet_from_factor(m, work=slot.logwork)
        return slot.d

    def commit(self, slot: Slot) -> None:
        nt = self.n_steps
        col = rect_view(slot.col, slot.rows, nt)
        append_block_column(self.state.factor, col, square_view(slot.m, nt))
        self.state.chosen.append(slot.sensor)
        self.state.objective += slot.d
        self.state.noise_logdet += self.noise_term(slot.sensor)

    def score(self, s: int, slot: Slot | None = None) -> tuple[float, np.ndarray, np.ndarray]:
        slot = slot or self.slots[0]
        self.load(s, slot)
        d = self.evaluate(slot)
        return d, rect_view(slot.col, slot.rows, self.n_steps), square_view(slot.m, self.n_steps)


def score_candidate(scorer: SchurScorer, s: int) -> tuple[float, np.ndarray, np.ndarray]:
    """``(d_s, Y_s, L_M)`` for candidate ``s`` against the scorer's current set.

    ``Y_s`` and ``L_M`` are views into a scorer slot and are overwritten by
    the next call.
    """
    if s in scorer.chosen:
        raise ValueError(f"sensor {s} is already selected")
    return scorer.score(s)


class NaiveScorer:
    """Baseline that refactorizes every augmented test matrix from scratch."""

    def __init__(self, source, budget: int, precision="f64", objective_mode: str = "normalized"):
        if objective_mode not in OBJECTIVE_MODES:
            raise ValueError(f"objective_mode must be one of {OBJECTIVE_MODES}")
        self.source = source
        self.n_steps = nt = source.n_steps
        self.dtype = resolve_dtype(precision)
        self.objective_mode = objective_mode
        self.noise = noise_logdets(source)
        if objective_mode == "normalized" and self.noise is None:
            raise ValueError("normalized objective needs per-sensor noise variances (source.noise_diag)")
        self.budget = budget
        capacity = budget * nt
        self.state = SelectionState([], LowerTriangularFactor(budget, nt, self.dtype))
        self.ks = allocate(capacity * capacity, self.dtype)  # K_S, grown in place
        self.test = allocate(capacity * capacity, self.dtype)
        self.slot = Slot(capacity, nt, self.dtype)
        self.logwork = allocate(capacity, self.dtype)

    noise_term = SchurScorer.noise_term
    selection_score = SchurScorer.selection_score
    load = SchurScorer.load

    @property
    def chosen(self) -> list[int]:
        return self.state.chosen

    def evaluate(self, slot: Slot) -> float:
        nt, n = self.n_steps, slot.rows
        m = n + nt
        T = square_view(self.test, m)
        T[:n, :n] = square_view(self.ks, n)
        T[n:, :n] = rect_view(slot.col, n, nt).T
        T[n:, n:] = square_view(slot.kss, nt)
        cholesky_in_place(T)
        slot.d = logdet_from_factor(T, work=self.logwork) - self.state.objective
        return slot.d

    def commit(self, slot: Slot) -> None:
        nt, n = self.n_steps, slot.rows
        m = n + nt
        grow_square_in_place(self.ks, n, m)
        KS = square_view(self.ks, m)
        col = rect_view(slot.col, n, nt)
        KS[:n, n:] = col
        KS[n:, :n] = col.T
        KS[n:, n:] = square_view(slot.kss, nt)
        self.state.chosen.append(slot.sensor)
        self.state.objective += slot.d
        self.state.noise_logdet += self.noise_term(slot.sensor)
        self.state.factor.load(cholesky(KS))


def _candidate_list(source, candidates) -> list[int]:
    C = range(source.n_sensors) if candidates is None else candidates
    C = sorted({int(c) for c in C})
    if C and not (0 <= C[0] and C[-1] < source.n_sensors):
        raise IndexError(f"candidate indices must lie in [0, {source.n_sensors})")
    return C


def _run_greedy(scorer, C: list[int], budget: int, reload_winner: bool) -> SelectionTrace:
    trace = SelectionTrace(scorer.objective_mode)
    if budget > len(C):
        raise ValueError(f"budget {budget} exceeds {len(C)} candidates")
    for k in range(1, budget + 1):
        t0 = time.perf_counter()
        chosen = set(scorer.chosen)
        remaining = [c for c in C if c not in chosen]
        if reload_winner:
            cur, spare = scorer.slot, None
        else:
            cur, spare = scorer.slots[0], scorer.slots[1]
        best = None
        best_score, best_s, n_inf = -math.inf, -1, 0
        for s in remaining:
            scorer.load(s, cur)
            try:
                d = scorer.evaluate(cur)
            except NotPositiveDefinite as exc:
                n_inf += 1
                log.warning("round %d: candidate %d infeasible (%s); skipped this round", k, s, exc)
                continue
            score = scorer.selection_score(s, d)
            if score > best_score:
                best_score, best_s = score, s
                if spare is not None:
                    # keep the winner's Y_s and L_M; score the next one elsewhere
                    best, cur = cur, (best if best is not None else spare)
        if best_s < 0:
            if not scorer.chosen:
                raise InfeasibleRound(k)
            warnings.warn(f"stopping after {len(scorer.chosen)} sensors: no feasible candidate in round {k}")
            break
        if reload_winner:
            best = cur
            scorer.load(best_s, best)
            scorer.evaluate(best)
        scorer.commit(best)
        wall = time.perf_counter() - t0
        trace.records.append(
            TraceRecord(
                k=k,
                chosen_index=best_s,
                objective=scorer.state.value(scorer.objective_mode),
                gain=best_score,
                n_evaluated=len(remaining),
                n_infeasible=n_inf,
                wall_time=wall,
                mean_candidate_time=wall / max(len(remaining), 1),
            )
        )
    return trace


def greedy_select(source, candidates=None, budget: int = 1, objective_mode: str = "normalized", precision="f64"):
    """Greedy D-optimal selection using the block Schur-complement update.

    Each round scores every remaining candidate by ``logdet`` of its Schur
    complement against the current factor and appends the best one. Ties go
    to the lowest sensor index. Returns ``(SelectionState, SelectionTrace)``.
    """
    C = _candidate_list(source, candidates)
    scorer = SchurScorer(source, budget, precision, objective_mode)
    trace = _run_greedy(scorer, C, budget, reload_winner=False)
    return scorer.state, trace


def naive_select(source, candidates=None, budget: int = 1, objective_mode: str = "normalized", precision="f64"):
    """Same contract as :func:`greedy_select`, refactorizing every test matrix."""
    C = _candidate_list(source, candidates)
    scorer = NaiveScorer(source, budget, precision, objective_mode)
    trace = _run_greedy(scorer, C, budget, reload_winner=True)
    return scorer.state, trace


# --- dense oracles --------------------------------------------------------


def dense_matrix(source) -> np.ndarray:
    if hasattr(source, "matrix"):
        return np.asarray(source.matrix, dtype=np.float64)
    return source.to_dense()


def subset_logdet(dense: np.ndarray, n_steps: int, S) -> float:
    """``logdet`` of a principal block submatrix via LU; 0 for the empty set."""
    S = list(S)
    if not S:
        return 0.0
    idx = (np.asarray(S)[:, None] * n_steps + np.arange(n_steps)).ravel()
    sign, ld = np.linalg.slogdet(dense[np.ix_(idx, idx)])
    if sign <= 0:
        raise NotPositiveDefinite(-1, f"submatrix for {S} is not positive definite")
    return float(ld)


def subset_objective(source, S, normalized: bool = True, dense: np.ndarray | None = None) -> float:
    dense = dense_matrix(source) if dense is None else dense
    value = subset_logdet(dense, source.n_steps, S)
    noise = noise_logdets(source)
    if normalized:
        if noise is None:
            raise ValueError("normalized objective needs per-sensor noise variances")
        value -= float(sum(noise[s] for s in S))
    return value


def exact_select(source, candidates=None, budget: int = 1, normalized: bool = True) -> SelectionState:
    """Exhaustive search over all ``budget``-subsets; lexicographic ties."""
    C = _candidate_list(source, candidates)
    if math.comb(len(C), budget) > EXACT_GUARD:
        raise TooLarge(f"C({len(C)}, {budget}) = {math.comb(len(C), budget)} subsets exceeds {EXACT_GUARD}")
    dense = dense_matrix(source)
    noise = noise_logdets(source)
    best, best_val = None, -math.inf
    for S in itertools.combinations(C, budget):
        val = subset_logdet(dense, source.n_steps, S)
        if normalized:
            val -= float(sum(noise[s] for s in S))
        if val > best_val:
            best, best_val = S, val
    nt = source.n_steps
    factor = LowerTriangularFactor(budget, nt)
    if best:
        idx = (np.asarray(best)[:, None] * nt + np.arange(nt)).ravel()
        factor.load(cholesky(dense[np.ix_(idx, idx)]))
    chosen = list(best or ())
    noise = 0.0 if noise is None else float(sum(noise[s] for s in chosen))
    return SelectionState(chosen, factor, subset_logdet(dense, nt, chosen), noise)


def random_baseline(source, candidates=None, budget: int = 1, n_samples: int = 100, seed: int = 0, normalized: bool = True):
    """Objective values of ``n_samples`` uniformly random ``budget``-subsets."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    C = np.asarray(_candidate_list(source, candidates))
    if budget > len(C):
        raise ValueError(f"budget {budget} exceeds {len(C)} candidates")
    rng = np.random.default_rng(seed)
    dense = dense_matrix(source)
    return [
        subset_objective(source, sorted(rng.choice(C, size=budget, replace=False).tolist()), normalized, dense)
        for _ in range(n_samples)
    ]


@dataclass
class ProbeReport:
    trials: int
    min_slack: float
    violations: int = 0


def diminishing_returns_slack(dense: np.ndarray, n_steps: int, X, Y, e: int) -> float:
    """``[f(X+e) - f(X)] - [f(Y+e) - f(Y)]`` for ``f = logdet`` of blocks."""
    X, Y = list(X), list(Y)
    gain_x = subset_logdet(dense, n_steps, X + [e]) - subset_logdet(dense, n_steps, X)
    gain_y = subset_logdet(dense, n_steps, Y + [e]) - subset_logdet(dense, n_steps, Y)
    return gain_x - gain_y


def submodularity_probe(source, trials: int = 500, seed: int = 0, candidates=None, tol: float = 1e-8) -> ProbeReport:
    """Check ``f(X+e) - f(X) >= f(Y+e) - f(Y)`` on random ``X <= Y``, ``e not in Y``.

    ``f`` is ``logdet`` of the principal block submatrix. Raises
    :class:`PropertyViolation` with the witness sets on the first failure.
    """
    C = _candidate_list(source, candidates)
    if len(C) < 2:
        raise ValueError("need at least two candidates")
    dense = dense_matrix(source)
    nt = source.n_steps
    rng = np.random.default_rng(seed)
    min_slack = math.inf
    for _ in range(trials):
        perm = rng.permutation(C).tolist()
        e = perm[0]
        y_size = int(rng.integers(0, len(C)))
        Y = sorted(perm[1 : 1 + y_size])
        X = sorted(rng.choice(Y, size=int(rng.integers(0, len(Y) + 1)), replace=False).tolist()) if Y else []
        slack = diminishing_returns_slack(dense, nt, X, Y, e)
        min_slack = min(min_slack, slack)
        if slack < -tol:
            raise PropertyViolation("diminishing returns violated", {"X": X, "Y": Y, "e": e, "slack": slack})
    return ProbeReport(trials, min_slack)
