"""Command-line interface: ``greedy-oed {build,select,evaluate,bench}``.

Exit codes: 0 success, 1 failed assertion (``--strict`` / ``--assert``),
2 usage or configuration error, 3 no feasible candidate, 4 I/O or corrupt
file, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .config import load_config, problem_from_config
from .errors import (
    AllInfeasible,
    CorruptFile,
    InfeasibleRound,
    InvalidConfig,
    NonFiniteResult,
    NotPositiveDefinite,
    TooLarge,
    WorkerFailure,
)
from .kstore import KStore, file_size, write_k
from .lti import assemble_k, pointwise_variance
from .parallel import run_parallel_greedy
from .selector import naive_select, random_baseline, subset_objective

EXIT_OK = 0
EXIT_ASSERT = 1
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4
EXIT_NUMERIC = 5

log = logging.getLogger("greedy_oed")


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def cmd_build(args) -> int:
    problem, weights = problem_from_config(load_config(args.config))
    K = assemble_k(problem, weights)
    write_k(K, args.out)
    size = Path(args.out).stat().st_size
    assert size == file_size(K.n_sensors, K.n_steps)
    print(f"n_sensors={K.n_sensors} n_steps={K.n_steps} file_size={size}")
    return EXIT_OK


def selection_document(state, trace) -> dict:
    """The deterministic part of a selection run (no timings, no engine knobs)."""
    return {
        "objective_mode": trace.objective_mode,
        "selected": list(state.chosen),
        "objective": [r.objective for r in trace.records],
        "gain": [r.gain for r in trace.records],
        "final_objective": state.value(trace.objective_mode),
    }


def cmd_select(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with KStore(args.kbf) as store:
        if args.budget > store.n_sensors:
            raise InvalidConfig(f"budget {args.budget} exceeds {store.n_sensors} sensors in {args.kbf}", "budget")
        if args.mode == "naive":
            if args.workers != 1:
                log.warning("naive mode runs single-threaded; ignoring --workers %d", args.workers)
            state, trace = naive_select(store, None, args.budget, args.objective, args.precision)
        else:
            state, trace = run_parallel_greedy(
                store,
                None,
                args.budget,
                args.workers,
                args.seed,
                pipeline=args.pipeline == "on",
                precision=args.precision,
                objective_mode=args.objective,
            )
    with open(out / "selection.json", "w") as f:
        json.dump(selection_document(state, trace), f, indent=2)
    trace.to_csv(out / "trace.csv")
    bench.write_rows(out / "round_timing.csv", bench.round_timing_rows(trace), bench.ROUND_TIMING_COLUMNS)
    print(f"selected {state.chosen}")
    print(f"{trace.objective_mode} objective {state.value(trace.objective_mode):.10g}")
    return EXIT_OK


def _checkpoints(spec: str | None, n: int) -> list[int]:
    if spec is None:
        return list(range(n + 1))
    ks = sorted(set(_int_list(spec)))
    if ks and not (0 <= ks[0] and ks[-1] <= n):
        raise InvalidConfig(f"checkpoints must lie in [0, {n}]", "checkpoints")
    return ks


def cmd_evaluate(args) -> int:
    problem, weights = problem_from_config(load_config(args.config))
    doc = json.loads(Path(args.selection).read_text())
    chosen = [int(s) for s in doc["selected"]]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if problem.n_params * problem.n_steps > 4096:
        raise TooLarge(
            f"N_m * N_t = {problem.n_params * problem.n_steps} exceeds 4096; "
            "reduce n_params or n_steps to evaluate posterior variances"
        )

    ks = _checkpoints(args.checkpoints, len(chosen))
    header = ["k"] + [f"p{j}_t{t}" for j in range(problem.n_params) for t in range(problem.n_steps)]
    with open(out / "variance.csv", "w") as f:
        f.write(",".join(header) + "\n")
        for k in ks:
            var = pointwise_variance(problem, chosen[:k], weights).ravel()
            f.write(",".join([str(k)] + [repr(float(v)) for v in var]) + "\n")

    K = assemble_k(problem, weights)
    dense = K.matrix
    greedy_value = subset_objective(K, chosen, True, dense)
    samples = random_baseline(K, None, len(chosen), args.samples, args.seed) if chosen else [0.0] * args.samples
    with open(out / "random_baseline.csv", "w") as f:
        f.write("sample,objective\n")
        for i, v in enumerate(samples):
            f.write(f"{i},{float(v)!r}\n")
    counts, edges = np.histogram(samples, bins=args.bins)
    with open(out / "histogram.csv", "w") as f:
        f.write("bin_lo,bin_hi,count\n")
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            f.write(f"{float(lo)!r},{float(hi)!r},{c}\n")
    n_below = sum(v < greedy_value for v in samples)
    summary = {
        "greedy_objective": greedy_value,
        "random_mean": float(np.mean(samples)),
        "random_max": float(np.max(samples)),
        "n_samples": len(samples),
        "n_below_greedy": int(n_below),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(
        f"greedy {greedy_value:.6g}  random mean {summary['random_mean']:.6g}  "
        f"max {summary['random_max']:.6g}  ({n_below}/{len(samples)} below greedy)"
    )
    if args.strict and n_below < len(samples):
        print("strict: greedy does not dominate every random configuration", file=sys.stderr)
        return EXIT_ASSERT
    return EXIT_OK


def _ms(value) -> str:
    return "OOM" if value is None else f"{value:.3f} ms"


def cmd_bench(args) -> int:
    if args.which == "complexity":
        rows = bench.complexity_sweep(
            args.n_steps, args.k_max, args.step, args.reps, args.seed, modes=tuple(args.modes.split(","))
        )
        bench.write_rows(args.out, rows, bench.COMPLEXITY_COLUMNS)
        for r in rows:
            print(f"k={r['k']:4d}" + "".join(f"  {m} {_ms(r[f'{m}_ms'])}" for m in ("naive", "schur") if f"{m}_ms" in r))
        failures = bench.check_complexity(rows)
        for msg in failures:
            print(f"check: {msg}", file=sys.stderr)
        if args.assert_ and failures:
            return EXIT_ASSERT
        return EXIT_OK

    if args.kbf:
        source = KStore(args.kbf)
    else:
        source = bench.standard_benchmark(seed=args.seed)
    try:
        rows = bench.strong_weak_scaling(
            source, None, args.b_round, _int_list(args.workers), args.reps, args.per_worker, args.seed
        )
    finally:
        if isinstance(source, KStore):
            source.close()
    bench.write_rows(args.out, rows, bench.SCALING_COLUMNS)
    for r in rows:
        print(f"{r['mode']:6s} workers={r['workers']}  {r['wall_ms']:.2f} ms  efficiency {r['efficiency']:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="greedy-oed", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="assemble K from a config file and write it as KBF")
    b.add_argument("config")
    b.add_argument("out", help="output .kbf path")
    b.set_defaults(func=cmd_build)

    s = sub.add_parser("select", help="greedy selection from a KBF file")
    s.add_argument("kbf")
    s.add_argument("--budget", type=int, required=True)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--mode", choices=("schur", "naive"), default="schur")
    s.add_argument("--pipeline", choices=("on", "off"), default="on")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--precision", choices=("f64", "f32"), default="f64")
    s.add_argument("--objective", choices=("normalized", "raw"), default="normalized")
    s.add_argument("--out-dir", default=".")
    s.set_defaults(func=cmd_select)

    e = sub.add_parser("evaluate", help="posterior variances and random baseline for a selection")
    e.add_argument("config")
    e.add_argument("selection", help="selection.json written by 'select'")
    e.add_argument("--out-dir", default=".")
    e.add_argument("--checkpoints", help="comma list of k values (default: every k)")
    e.add_argument("--samples", type=int, default=100)
    e.add_argument("--bins", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--strict", action="store_true", help="fail unless greedy beats every random sample")
    e.set_defaults(func=cmd_evaluate)

    bn = sub.add_parser("bench", help="timing benchmarks")
    bsub = bn.add_subparsers(dest="which", required=True)
    c = bsub.add_parser("complexity", help="per-candidate time versus k")
    c.add_argument("--n-steps", type=int, default=32)
    c.add_argument("--k-max", type=int, default=300)
    c.add_argument("--step", type=int, default=30)
    c.add_argument("--reps", type=int, default=5)
    c.add_argument("--modes", default="naive,schur")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default="complexity.csv")
    c.add_argument("--assert", dest="assert_", action="store_true", help="nonzero exit if a slope check fails")
    c.set_defaults(func=cmd_bench)
    sc = bsub.add_parser("scaling", help="strong and weak scaling of one round")
    sc.add_argument("--kbf", help="K file (default: the standard wave benchmark)")
    sc.add_argument("--workers", default="1,2,4")
    sc.add_argument("--b-round", type=int, default=8)
    sc.add_argument("--per-worker", type=int, default=64)
    sc.add_argument("--reps", type=int, default=3)
    sc.add_argument("--seed", type=int, default=0)
    sc.add_argument("--out", default="scaling.csv")
    sc.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InvalidConfig, TooLarge, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InfeasibleRound, AllInfeasible) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (CorruptFile, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except WorkerFailure as exc:
        cause = exc.cause
        if isinstance(cause, (InfeasibleRound, AllInfeasible)):
            print(f"infeasible: {exc}", file=sys.stderr)
            return EXIT_INFEASIBLE
        if isinstance(cause, (CorruptFile, OSError)):
            print(f"I/O error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NotPositiveDefinite, NonFiniteResult) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
