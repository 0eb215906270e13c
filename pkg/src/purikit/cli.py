"""Command-line driver for sampling, protocol sweeps and variational runs.

Every command writes its result file plus ``<out>.json``, a manifest holding
the command line, seeds and sizes needed to rerun it.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, experiments, metrics, sampler, variational
from .metrics import IterationStats, NumericalFailure
from .quantum import DegenerateOutcomeError, InvalidStateError

log = logging.getLogger("purikit")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

RESULT_COLUMNS = (
    "iteration",
    "mean_concurrence",
    "concurrence_std",
    "concurrence_stderr",
    "mean_success",
    "success_std",
    "success_stderr",
    "n_nonzero",
)
DESK_N = 100_000
FULL_N = 1_000_000
FULL_CHAINS = 10


class UsageError(Exception):
    """Invalid flag values or unusable paths."""


def fmt(value) -> str:
    """Round-trip-safe text for CSV cells."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def _write_csv(path, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([fmt(v) for v in row])
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc}") from exc


def _stats_row(s: IterationStats):
    return [getattr(s, c) for c in RESULT_COLUMNS]


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("PURIKIT_THREADS")
        try:
            n = int(env) if env else 1
        except ValueError:
            raise UsageError(f"PURIKIT_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def _positive(name, value, allow_zero=False):
    if value < 0 or (value == 0 and not allow_zero):
        raise UsageError(f"--{name} must be {'non-negative' if allow_zero else 'positive'}")


def _load_states(path) -> tuple[np.ndarray, dict]:
    try:
        vectors, header = sampler.read_dump(path)
    except FileNotFoundError:
        raise UsageError(f"no such dump: {path}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if len(vectors) < 2:
        raise UsageError(f"{path}: need at least two states")
    return sampler.bloch_to_density(vectors), header


def _write_manifest(out, argv, started, **fields) -> None:
    manifest = {
        "command_line": ["purikit"] + list(argv),
        "software_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "generator": sampler.GENERATOR_NAME,
        **fields,
        "wall_time_s": time.perf_counter() - started,
    }
    try:
        Path(f"{out}.json").write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        raise UsageError(f"cannot write manifest for {out}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_sample(args, argv, started) -> None:
    n, chains = args.n, args.chains
    if args.full_scale:
        n = FULL_N
        chains = chains if args.chains_given else FULL_CHAINS
    _positive("n", n)
    _positive("chains", chains)
    _positive("thin", args.thin)
    _positive("burn-in", args.burn_in, allow_zero=True)
    threads = _threads(args)
    vectors = sampler.sample_chains(n, chains, args.seed, args.burn_in, args.thin, threads)
    try:
        sampler.write_dump(args.out, vectors, args.seed)
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc}") from exc
    conc = np.asarray(metrics.concurrence(sampler.bloch_to_density(vectors)), dtype=float)
    sep = float(np.mean(conc == 0))
    log.info("%d states, mean concurrence %.5f, separable fraction %.4f%%", len(conc), conc.mean(), 100 * sep)
    _write_manifest(
        args.out,
        argv,
        started,
        seeds=[args.seed + i for i in range(chains)],
        chains=chains,
        n_per_chain=n,
        burn_in=args.burn_in,
        thinning=args.thin,
        records=len(vectors),
        mean_concurrence=float(conc.mean()),
        separable_fraction=sep,
    )


def cmd_evaluate(args, argv, started) -> None:
    _positive("iters", args.iters, allow_zero=True)
    states, header = _load_states(args.input)
    threads = _threads(args)
    stats = experiments.trajectory_stats(args.protocol, states, args.iters, threads)
    limit, err = metrics.asymptotic_limit(args.protocol, states)
    _, std, _ = metrics.aggregate(metrics.purifiable_indicator(args.protocol, states).astype(float))
    rows = [_stats_row(s) for s in stats]
    rows.append(["inf", limit, std, err, "", "", "", int(round(limit * len(states)))])
    _write_csv(args.out, RESULT_COLUMNS, rows)
    log.info("%s: C(0) = %.5f, C(%d) = %.5f, limit %.5f", args.protocol, stats[0].mean_concurrence,
             args.iters, stats[-1].mean_concurrence, limit)
    _write_manifest(args.out, argv, started, input=str(args.input), dump_seed=header["seed"],
                    n_states=len(states), protocol=args.protocol, iterations=args.iters)


def cmd_fidelity(args, argv, started) -> None:
    _positive("iters", args.iters, allow_zero=True)
    states, header = _load_states(args.input)
    rows = experiments.fidelity_table(args.protocol, states, args.iters, _threads(args))
    _write_csv(args.out, ("iteration", "attractor", "mean_fidelity", "stderr"), rows)
    _write_manifest(args.out, argv, started, input=str(args.input), dump_seed=header["seed"],
                    n_states=len(states), protocol=args.protocol, iterations=args.iters)


def cmd_histogram(args, argv, started) -> None:
    _positive("bins", args.bins)
    _positive("iteration", args.iteration, allow_zero=True)
    if args.iteration > 0 and args.protocol is None:
        raise UsageError("--iteration > 0 needs --protocol")
    states, header = _load_states(args.input)
    values = experiments.concurrence_at(args.protocol, states, args.iteration, _threads(args))
    hist = experiments.concurrence_histogram(values, args.bins, args.exclude_zero)
    _write_csv(args.out, ("bin_lo", "bin_hi", "count"), hist.rows())
    _write_manifest(args.out, argv, started, input=str(args.input), dump_seed=header["seed"],
                    n_states=len(states), protocol=args.protocol, iteration=args.iteration,
                    bins=args.bins, exclude_zero=args.exclude_zero)


def cmd_optimize(args, argv, started) -> None:
    _positive("rounds", args.rounds)
    _positive("ns", args.ns)
    _positive("restarts", args.restarts)
    _positive("max-iter", args.max_iter, allow_zero=True)
    try:
        policy = variational.MeasurementPolicy.parse(args.policy)
        cfg = variational.OptimizerConfig(
            max_iterations=args.max_iter,
            gradient_tolerance=args.gtol,
            history_size=args.history,
            restarts=args.restarts,
            subset_size=args.ns,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    states, header = _load_states(args.input)
    stats0, records = variational.run_adaptive_protocol(
        states,
        args.rounds,
        policy,
        cfg,
        projector_first=args.projector_first,
        seed=args.seed,
        threads=_threads(args),
    )
    for r in records:
        if r.converged is False:
            log.warning("round %d: optimizer did not converge; using best angles found", r.round)
    rows = [_stats_row(stats0)] + [_stats_row(r.stats) for r in records]
    _write_csv(args.out, RESULT_COLUMNS, rows)
    angles_path = args.angles or f"{args.out}.angles.json"
    try:
        variational.dump_angles(records, angles_path)
    except OSError as exc:
        raise UsageError(f"cannot write {angles_path}: {exc}") from exc
    _write_manifest(args.out, argv, started, input=str(args.input), dump_seed=header["seed"],
                    n_states=len(states), seed=args.seed, policy=str(policy), rounds=args.rounds,
                    projector_first=args.projector_first, subset_size=args.ns, restarts=args.restarts,
                    max_iterations=args.max_iter, angles=str(angles_path))


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="purikit", description="Statistics of entanglement purification on random two-qubit states.")
    p.add_argument("--version", action="version", version=f"purikit {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, needs_input=True):
        if needs_input:
            sp.add_argument("--in", dest="input", required=True, help="state dump written by 'sample'")
        sp.add_argument("--out", required=True)
        sp.add_argument("--threads", type=int, default=None, help="worker cap (default: $PURIKIT_THREADS or 1)")

    s = sub.add_parser("sample", help="draw states with hit-and-run")
    s.add_argument("--n", type=int, default=DESK_N, help="states per chain")
    s.add_argument("--chains", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--burn-in", type=int, default=1000)
    s.add_argument("--thin", type=int, default=40)
    s.add_argument("--full-scale", action="store_true", help=f"{FULL_N} states per chain, {FULL_CHAINS} chains")
    common(s, needs_input=False)
    s.set_defaults(func=cmd_sample)

    protocols = list(experiments.PROTOCOLS)
    e = sub.add_parser("evaluate", help="iterate a fixed protocol over a dump")
    e.add_argument("--protocol", choices=protocols, required=True)
    e.add_argument("--iters", type=int, default=15)
    common(e)
    e.set_defaults(func=cmd_evaluate)

    o = sub.add_parser("optimize", help="adaptive variational protocol")
    o.add_argument("--rounds", type=int, default=6)
    o.add_argument("--policy", default="greedy", help="'greedy' or 'fixed:k'")
    o.add_argument("--projector-first", action="store_true")
    o.add_argument("--ns", type=int, default=1000, help="optimization subset size")
    o.add_argument("--restarts", type=int, default=8)
    o.add_argument("--max-iter", type=int, default=100)
    o.add_argument("--gtol", type=float, default=1e-6)
    o.add_argument("--history", type=int, default=10)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--angles", default=None, help="angle JSON path (default: <out>.angles.json)")
    common(o)
    o.set_defaults(func=cmd_optimize)

    f = sub.add_parser("fidelity", help="conditional fidelities per attractor")
    f.add_argument("--protocol", choices=protocols[:-1], required=True)
    f.add_argument("--iters", type=int, default=15)
    common(f)
    f.set_defaults(func=cmd_fidelity)

    h = sub.add_parser("histogram", help="concurrence histogram")
    h.add_argument("--bins", type=int, default=50)
    h.add_argument("--exclude-zero", action=argparse.BooleanOptionalAction, default=True)
    h.add_argument("--iteration", type=int, default=0)
    h.add_argument("--protocol", choices=protocols, default=None)
    common(h)
    h.set_defaults(func=cmd_histogram)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.chains_given = getattr(args, "chains", None) is not None
    if getattr(args, "chains", 0) is None:
        args.chains = 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    started = time.perf_counter()
    try:
        args.func(args, argv, started)
    except UsageError as exc:
        print(f"purikit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, sampler.ChainStallError, DegenerateOutcomeError, InvalidStateError,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"purikit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
