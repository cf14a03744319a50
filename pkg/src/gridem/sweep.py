"""Experiment sweeps emitting plot-ready CSV tables.

Axes:

* ``states``: number of true states ``K_true``; the single-cluster baseline
  and EM with ``K = K_true`` are scored on the same data.
* ``samples``: training-set size ``T``.
* ``iterations``: per-iteration accuracy and error at several noise levels,
  recomputed from the EM label and parameter histories.
* ``noise``: relative noise level.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .em import EMConfig, extract_topology, run_em
from .evaluation import evaluate, evaluate_solution
from .grid import StateParams
from .io import Scenario
from .pipeline import regression_data, simulate

log = logging.getLogger(__name__)

AXES = ("states", "samples", "iterations", "noise")

DEFAULT_VALUES = {
    "states": [1, 2, 3, 4],
    "samples": list(range(400, 3601, 400)),
    "iterations": [0.005, 0.01, 0.02, 0.03, 0.05],
    "noise": [0.005, 0.01, 0.02, 0.03, 0.05],
}

COLUMNS = ["axis", "value", "method", "K", "T", "noise", "iteration", "status", "label_accuracy",
           "pooled_mse", "max_g_rel_err", "topology_exact", "iterations_used", "converged",
           "log_likelihood", "seconds", "message"]


@dataclass(frozen=True)
class SweepOptions:
    T: int | None = None            # default 3000, or 3200 on the iterations axis
    noise: float = 0.01
    n_states: int | None = None     # default: every state of the scenario
    config: EMConfig = EMConfig(K=4)
    jobs: int = 1


def _row(axis, value, method, K, T, noise, **kw) -> dict:
    row = dict.fromkeys(COLUMNS, "")
    row.update(axis=axis, value=value, method=method, K=K, T=T, noise=noise, status="ok")
    row.update(kw)
    return row


def _summary(report, sol) -> dict:
    return dict(label_accuracy=report.label_accuracy, pooled_mse=report.pooled_mse,
                max_g_rel_err=report.max_g_rel_err, topology_exact=report.all_topologies_exact,
                iterations_used=sol.iterations_used, converged=sol.converged,
                log_likelihood=sol.objective)


def _fit(data, ms, config):
    t0 = time.perf_counter()
    sol = run_em(data, config)
    return sol, evaluate_solution(sol, ms.truth_params, ms.truth_labels), time.perf_counter() - t0


def iteration_rows(axis, value, sol, ms, T, noise, tau_rel) -> list[dict]:
    rows = []
    for i, (labels, betas) in enumerate(zip(sol.label_history, sol.param_history), start=1):
        params = [StateParams.from_beta(b) for b in betas]
        edges = [extract_topology(p.g, p.b, tau_rel) for p in params]
        rep = evaluate(params, edges, labels, ms.truth_params, ms.truth_labels)
        rows.append(_row(axis, value, "em", len(params), T, noise, iteration=i,
                         label_accuracy=rep.label_accuracy, pooled_mse=rep.pooled_mse,
                         max_g_rel_err=rep.max_g_rel_err, topology_exact=rep.all_topologies_exact,
                         log_likelihood=sol.trace[i - 1]))
    return rows


def run_point(axis: str, value, sc: Scenario, opts: SweepOptions) -> list[dict]:
    """Rows for one grid point."""
    cfg = opts.config
    T = opts.T or (3200 if axis == "iterations" else 3000)
    noise = opts.noise
    n_states = opts.n_states or len(sc.states)
    if axis == "states":
        n_states = int(value)
    elif axis == "samples":
        T = int(value)
    else:
        noise = float(value)
    ms = simulate(sc, T=T, noise=noise, n_states=n_states)
    data = regression_data(sc.grid, ms)
    rows = []
    if axis == "states":
        for method, K in (("baseline", 1), ("em", n_states)):
            sol, rep, sec = _fit(data, ms, replace(cfg, K=K))
            rows.append(_row(axis, value, method, K, T, noise, seconds=sec, **_summary(rep, sol)))
        return rows
    sol, rep, sec = _fit(data, ms, replace(cfg, K=n_states))
    if axis == "iterations":
        return iteration_rows(axis, value, sol, ms, T, noise, cfg.tau_rel)
    return [_row(axis, value, "em", n_states, T, noise, seconds=sec, **_summary(rep, sol))]


def _safe_point(args) -> list[dict]:
    axis, value, sc, opts = args
    try:
        return run_point(axis, value, sc, opts)
    except Exception as exc:  # a failed point becomes a row, the sweep continues
        log.warning("%s=%s failed: %s", axis, value, exc)
        return [_row(axis, value, "em", opts.config.K, opts.T or "", opts.noise,
                     status="error", message=f"{type(exc).__name__}: {exc}")]


def run_sweep(axis: str, sc: Scenario, values=None, opts: SweepOptions = SweepOptions()) -> list[dict]:
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {', '.join(AXES)}")
    values = list(DEFAULT_VALUES[axis] if values is None else values)
    jobs = [(axis, v, sc, opts) for v in values]
    if opts.jobs > 1:
        with ProcessPoolExecutor(max_workers=opts.jobs) as pool:
            chunks = list(pool.map(_safe_point, jobs))
    else:
        chunks = [_safe_point(j) for j in jobs]
    return [row for chunk in chunks for row in chunk]


def write_table(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def cmd_sweep(axis: str, sc: Scenario, out, values=None, opts: SweepOptions = SweepOptions()) -> list[dict]:
    rows = run_sweep(axis, sc, values, opts)
    write_table(out, rows)
    return rows


def final_accuracy_by_value(rows) -> dict:
    """Convenience view: last iteration's accuracy per grid value."""
    out = {}
    for r in rows:
        if r["status"] == "ok":
            out[r["value"]] = r["label_accuracy"]
    return out


def as_array(rows, column) -> np.ndarray:
    return np.array([np.nan if r[column] == "" else float(r[column]) for r in rows])
