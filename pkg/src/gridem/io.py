"""File formats: grid and scenario configs, measurement CSV, truth sidecar, solution."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .em import EMSolution
from .grid import GridSpec, StateParams
from .powerflow import CHANNELS, LoadProfile, MeasurementSet, expand_schedule


class FormatError(ValueError):
    """A file does not follow its documented format."""


_BRANCHES = {"type": "array", "items": {"type": "array", "items": {"type": "integer"},
                                        "minItems": 2, "maxItems": 2}}

GRID_SCHEMA = {
    "type": "object",
    "properties": {
        "n_bus": {"type": "integer", "minimum": 1},
        "slack_bus": {"type": "integer", "minimum": 1},
        "branches": {"oneOf": [_BRANCHES, {"const": "complete"}]},
    },
    "required": ["n_bus", "branches"],
    "additionalProperties": False,
}

_NOISE = {"oneOf": [
    {"type": "number", "minimum": 0},
    {"type": "object", "properties": {c: {"type": "number", "minimum": 0} for c in CHANNELS},
     "additionalProperties": False},
]}

SCENARIO_SCHEMA = {
    "type": "object",
    "properties": {
        "grid": {"oneOf": [{"type": "string"}, GRID_SCHEMA]},
        "states": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "name": {"type": "string"},
                    "lines": {"type": "array", "items": {
                        "type": "array", "prefixItems": [{"type": "integer"}, {"type": "integer"},
                                                         {"type": "number"}, {"type": "number"}],
                        "minItems": 4, "maxItems": 4}},
                },
                "required": ["lines"],
                "additionalProperties": False,
            },
        },
        "schedule": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0},
                                                "minItems": 2, "maxItems": 2}},
        "schedule_mode": {"enum": ["random", "blocks"]},
        "load": {
            "type": "object",
            "properties": {
                "base_p": {"type": "array", "items": {"type": "number"}},
                "base_q": {"type": "array", "items": {"type": "number"}},
                "cv": {"type": "number", "minimum": 0},
            },
            "required": ["base_p", "base_q"],
            "additionalProperties": False,
        },
        "noise": _NOISE,
        "seed": {"type": "integer", "minimum": 0},
    },
    "required": ["grid", "states", "schedule", "load"],
    "additionalProperties": False,
}


def _validate(obj, schema, what):
    try:
        jsonschema.validate(obj, schema)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise FormatError(f"invalid {what} at {loc}: {exc.message}") from None


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None


def data_path(name: str) -> Path:
    """Path of a bundled fixture file."""
    return Path(resources.files("gridem") / "data" / name)


def grid_from_dict(obj) -> GridSpec:
    _validate(obj, GRID_SCHEMA, "grid config")
    slack = obj.get("slack_bus", 1)
    if obj["branches"] == "complete":
        return GridSpec.complete(obj["n_bus"], slack)
    return GridSpec(obj["n_bus"], tuple(tuple(b) for b in obj["branches"]), slack)


def load_grid(path) -> GridSpec:
    return grid_from_dict(_read_json(path))


def grid_to_dict(spec: GridSpec) -> dict:
    return {"n_bus": spec.n_bus, "slack_bus": spec.slack_bus, "branches": [list(b) for b in spec.branches]}


@dataclass
class Scenario:
    grid: GridSpec
    states: list[StateParams]
    names: list[str]
    schedule: list[tuple[int, int]]
    schedule_mode: str
    loads: LoadProfile
    noise: dict
    seed: int

    @property
    def T(self) -> int:
        return sum(c for _, c in self.schedule)

    def labels(self) -> np.ndarray:
        return expand_schedule(self.schedule, self.schedule_mode, self.seed)


def scenario_from_dict(obj, base_dir=None) -> Scenario:
    _validate(obj, SCENARIO_SCHEMA, "scenario config")
    grid = obj["grid"]
    if isinstance(grid, str):
        path = Path(grid)
        if not path.is_absolute():
            path = Path(base_dir or ".") / path
        spec = load_grid(path)
    else:
        spec = grid_from_dict(grid)
    states, names = [], []
    for i, st in enumerate(obj["states"]):
        try:
            params = StateParams.from_lines(spec, st["lines"])
            params.check(spec, physical=True)
        except ValueError as exc:
            raise FormatError(f"state {i}: {exc}") from None
        states.append(params)
        names.append(st.get("name", f"state{i}"))
    schedule = [(int(s), int(c)) for s, c in obj["schedule"]]
    if any(s >= len(states) for s, _ in schedule):
        raise FormatError("schedule refers to an undefined state")
    load = obj["load"]
    loads = LoadProfile(load["base_p"], load["base_q"], load.get("cv", 0.2))
    if loads.base_p.size != spec.n_bus:
        raise FormatError(f"load profile lists {loads.base_p.size} buses, grid has {spec.n_bus}")
    noise = obj.get("noise", 0.0)
    if not isinstance(noise, dict):
        noise = dict.fromkeys(CHANNELS, float(noise))
    noise = {c: float(noise.get(c, 0.0)) for c in CHANNELS}
    return Scenario(spec, states, names, schedule, obj.get("schedule_mode", "random"), loads, noise,
                    int(obj.get("seed", 0)))


def load_scenario(path) -> Scenario:
    path = Path(path)
    return scenario_from_dict(_read_json(path), base_dir=path.parent)


def bundled_scenario() -> Scenario:
    """The 8-bus, four-state fixture (two topologies, two parameter sets each)."""
    return load_scenario(data_path("scenario_8bus_4state.json"))


# measurement CSV

def _header(n: int, with_state: bool) -> list[str]:
    cols = ["t"] + (["state"] if with_state else [])
    for ch in CHANNELS:
        cols += [f"{ch}_{i}" for i in range(1, n + 1)]
    return cols


def write_measurements(path, ms: MeasurementSet, with_state: bool = False) -> None:
    """One row per timestamp; ``state`` is the 0-based truth label when included."""
    with_state = with_state and ms.truth_labels is not None
    data = ms.channels()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(ms.n_bus, with_state))
        for t in range(ms.T):
            row = [str(t)] + ([str(int(ms.truth_labels[t]))] if with_state else [])
            row += [repr(float(x)) for x in data[:, t, :].ravel()]
            w.writerow(row)


def read_measurements(path) -> MeasurementSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, header row required") from None
        with_state = len(header) > 1 and header[1] == "state"
        n_val = len(header) - 1 - with_state
        if n_val <= 0 or n_val % 4:
            raise FormatError(f"{path}: header has {len(header)} columns, expected t[, state] and 4n values")
        n = n_val // 4
        if header != _header(n, with_state):
            raise FormatError(f"{path}: unexpected header")
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            try:
                vals = [float(x) for x in row[1 + with_state:]]
                if with_state:
                    labels.append(int(row[1]))
            except ValueError as exc:
                raise FormatError(f"{path}: row {lineno}: {exc}") from None
            if not np.all(np.isfinite(vals)):
                raise FormatError(f"{path}: row {lineno} has non-finite values")
            rows.append(vals)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    arr = np.array(rows).reshape(len(rows), 4, n).transpose(1, 0, 2)
    return MeasurementSet(*arr, truth_labels=np.array(labels) if with_state else None)


# truth sidecar and solution files

def params_to_dict(p: StateParams) -> dict:
    return {"g": p.g.tolist(), "b": p.b.tolist()}


def params_from_dict(obj) -> StateParams:
    return StateParams(obj["g"], obj["b"])


def write_truth(path, ms: MeasurementSet, spec: GridSpec, names=None) -> None:
    obj = {
        "grid": grid_to_dict(spec),
        "labels": ms.truth_labels.tolist(),
        "states": [dict(name=(names[k] if names else f"state{k}"), **params_to_dict(p))
                   for k, p in enumerate(ms.truth_params)],
        "noise": ms.noise_std,
        "seed": ms.seed,
    }
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


@dataclass
class Truth:
    grid: GridSpec
    labels: np.ndarray
    params: list[StateParams]
    noise: dict


def read_truth(path) -> Truth:
    obj = _read_json(path)
    try:
        return Truth(grid_from_dict(obj["grid"]), np.asarray(obj["labels"], dtype=int),
                     [params_from_dict(s) for s in obj["states"]], obj.get("noise", {}))
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from None


def solution_to_dict(sol: EMSolution, spec: GridSpec) -> dict:
    return {
        "K": sol.K,
        "clusters": [
            {"g": p.g.tolist(), "b": p.b.tolist(),
             "edges": [list(spec.branches[j]) for j in sorted(e)]}
            for p, e in zip(sol.params, sol.edges)
        ],
        "phi": sol.phi.tolist(),
        "labels": sol.labels.tolist(),
        "trace": sol.trace,
        "iterations_used": sol.iterations_used,
        "converged": sol.converged,
    }


def write_solution(path, sol: EMSolution, spec: GridSpec) -> None:
    with open(path, "w") as fh:
        json.dump(solution_to_dict(sol, spec), fh, indent=1)
        fh.write("\n")


@dataclass
class SolutionFile:
    params: list[StateParams]
    edges: list[list[tuple[int, int]]]
    phi: np.ndarray
    labels: np.ndarray
    trace: list[float]
    converged: bool


def read_solution(path) -> SolutionFile:
    obj = _read_json(path)
    try:
        clusters = obj["clusters"]
        return SolutionFile([params_from_dict(c) for c in clusters],
                            [[tuple(e) for e in c["edges"]] for c in clusters],
                            np.asarray(obj["phi"]), np.asarray(obj["labels"], dtype=int),
                            list(obj["trace"]), bool(obj["converged"]))
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from None
