"""Command-line interface: ``gridem simulate | estimate | evaluate | sweep``.

Exit codes: 0 success, 1 input or configuration error, 2 usage error,
3 EM stopped at the iteration cap without converging, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import io
from .em import EMConfig, EMError
from .evaluation import evaluate
from .glra import GLRAError
from .pipeline import estimate, simulate
from .powerflow import PowerFlowError
from .sweep import AXES, SweepOptions, cmd_sweep

EXIT_OK, EXIT_INPUT, EXIT_USAGE, EXIT_NOT_CONVERGED, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("gridem")


def _positive_int(text):
    val = int(text)
    if val < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return val


def _em_flags(p):
    p.add_argument("--k", type=_positive_int, default=4, help="number of system states (default 4)")
    p.add_argument("--seed", type=int, default=0, help="EM seed (default 0)")
    p.add_argument("--max-iters", type=_positive_int, default=50)
    p.add_argument("--tol", type=float, default=1e-6, help="relative log-likelihood tolerance")
    p.add_argument("--tau-rel", type=float, default=0.05, help="topology threshold relative to the largest branch")
    p.add_argument("--restarts", type=_positive_int, default=1)
    p.add_argument("--split-merge", type=int, default=3, help="split-merge attempts after convergence (0 disables)")
    p.add_argument("--empty-policy", choices=("reinit", "merge"), default="reinit")


def _config(args, K=None) -> EMConfig:
    return EMConfig(K=K or args.k, max_iters=args.max_iters, rel_tol=args.tol, seed=args.seed,
                    empty_cluster_policy=args.empty_policy, n_restarts=args.restarts,
                    tau_rel=args.tau_rel, split_merge=args.split_merge)


def _scenario(path):
    return io.load_scenario(path) if path else io.bundled_scenario()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridem", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate measurements and a truth sidecar from a scenario")
    p.add_argument("--scenario", help="scenario JSON (default: bundled 8-bus, 4-state)")
    p.add_argument("--samples", type=_positive_int, help="override T with a balanced schedule")
    p.add_argument("--states", type=_positive_int, help="use only the first N states")
    p.add_argument("--noise", type=float, help="relative noise level for every channel")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--with-state", action="store_true", help="include the true label column in the CSV")
    p.add_argument("--truth", help="truth sidecar path (default: <out>.truth.json)")
    p.add_argument("--out", required=True, help="measurement CSV path")

    p = sub.add_parser("estimate", help="fit topology and line parameters to a measurement CSV")
    p.add_argument("measurements")
    p.add_argument("--grid", help="grid JSON (default: bundled 8-bus)")
    p.add_argument("--noise", type=float, default=0.01, help="relative noise level of the data (default 0.01)")
    _em_flags(p)
    p.add_argument("--out", required=True, help="solution JSON path")

    p = sub.add_parser("evaluate", help="score a solution against a truth sidecar")
    p.add_argument("solution")
    p.add_argument("truth")
    p.add_argument("--out", help="report JSON path (default: stdout)")

    p = sub.add_parser("sweep", help="run an experiment sweep and write a CSV table",
                       description="Each grid point is fitted with K equal to its number of true states.")
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--scenario", help="scenario JSON (default: bundled 8-bus, 4-state)")
    p.add_argument("--values", type=float, nargs="+", help="grid points (default depends on the axis)")
    p.add_argument("--samples", type=_positive_int, help="T for axes other than samples")
    p.add_argument("--noise", type=float, default=0.01, help="noise level for axes other than noise/iterations")
    p.add_argument("--jobs", type=_positive_int, default=1)
    _em_flags(p)
    p.add_argument("--out", required=True, help="table CSV path")
    return parser


def cmd_simulate(args) -> int:
    sc = _scenario(args.scenario)
    ms = simulate(sc, T=args.samples, noise=args.noise, n_states=args.states, seed=args.seed)
    io.write_measurements(args.out, ms, with_state=args.with_state)
    truth = args.truth or str(Path(args.out).with_suffix("")) + ".truth.json"
    names = sc.names[: len(ms.truth_params)]
    io.write_truth(truth, ms, sc.grid, names)
    print(f"wrote {ms.T} samples to {args.out} and truth to {truth}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    spec = io.load_grid(args.grid) if args.grid else io.load_grid(io.data_path("grid_8bus.json"))
    ms = io.read_measurements(args.measurements)
    if ms.n_bus != spec.n_bus:
        raise io.FormatError(f"{args.measurements} has {ms.n_bus} buses, grid has {spec.n_bus}")
    sol = estimate(spec, ms, _config(args), noise=args.noise)
    io.write_solution(args.out, sol, spec)
    sizes = ", ".join(str(len(e)) for e in sol.edges)
    print(f"K={sol.K}: log-likelihood {sol.objective:.6g} after {sol.iterations_used} iterations; "
          f"edges per cluster: {sizes}")
    if not sol.converged:
        print("EM reached the iteration cap before converging", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_evaluate(args) -> int:
    sol = io.read_solution(args.solution)
    truth = io.read_truth(args.truth)
    edges = [[truth.grid.branch_index(*e) for e in es] for es in sol.edges]
    rep = evaluate(sol.params, edges, sol.labels, truth.params, truth.labels)
    text = json.dumps(rep.to_dict(truth.grid), indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_sweep_main(args) -> int:
    sc = _scenario(args.scenario)
    values = args.values
    if values is not None and args.axis in ("states", "samples"):
        values = [int(v) for v in values]
    opts = SweepOptions(T=args.samples, noise=args.noise, config=_config(args), jobs=args.jobs)
    rows = cmd_sweep(args.axis, sc, args.out, values, opts)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"wrote {len(rows)} rows to {args.out} ({failed} failed)")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "evaluate": cmd_evaluate, "sweep": cmd_sweep_main}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (io.FormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (EMError, GLRAError, PowerFlowError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
