"""AC power flow: branch-wise injections, Newton solution and synthetic scenarios."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .grid import GridSpec, StateParams, assemble_admittance, is_connected

log = logging.getLogger(__name__)

CHANNELS = ("v", "theta", "p", "q")


class PowerFlowError(RuntimeError):
    """Newton iteration failed or the network is not solvable."""


@dataclass(frozen=True)
class OperatingPoint:
    """Voltage magnitudes, angles (rad) and net injections, all per-unit."""

    v: np.ndarray
    theta: np.ndarray
    p: np.ndarray
    q: np.ndarray


@dataclass
class MeasurementSet:
    """Per-timestamp direct measurements stored as ``(T, n)`` arrays.

    ``noise_std`` holds the relative noise level per channel and ``abs_std``
    the resulting absolute standard deviation per channel and bus
    (shape ``(4, n)``, channel order v, theta, p, q). Labels are 0-based.
    """

    v: np.ndarray
    theta: np.ndarray
    p: np.ndarray
    q: np.ndarray
    noise_std: dict = field(default_factory=lambda: dict.fromkeys(CHANNELS, 0.0))
    abs_std: np.ndarray | None = None
    truth_labels: np.ndarray | None = None
    truth_params: list | None = None
    seed: int | None = None

    def __post_init__(self):
        self.v = np.atleast_2d(np.asarray(self.v, dtype=float))
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        self.p = np.atleast_2d(np.asarray(self.p, dtype=float))
        self.q = np.atleast_2d(np.asarray(self.q, dtype=float))
        shapes = {a.shape for a in (self.v, self.theta, self.p, self.q)}
        if len(shapes) != 1:
            raise ValueError(f"channel arrays disagree in shape: {sorted(shapes)}")
        if self.truth_labels is not None:
            self.truth_labels = np.asarray(self.truth_labels, dtype=int)
            if self.truth_labels.shape != (self.T,):
                raise ValueError("truth_labels must have one entry per timestamp")
            if self.truth_labels.min(initial=0) < 0:
                raise ValueError("truth labels must be non-negative")
            if self.truth_params is not None and self.truth_labels.max(initial=0) >= len(self.truth_params):
                raise ValueError("truth label refers to a missing state")
        if any(s < 0 for s in self.noise_std.values()):
            raise ValueError("noise_std must be non-negative")

    @property
    def T(self) -> int:
        return self.v.shape[0]

    @property
    def n_bus(self) -> int:
        return self.v.shape[1]

    def point(self, t: int) -> OperatingPoint:
        return OperatingPoint(self.v[t], self.theta[t], self.p[t], self.q[t])

    def channels(self) -> np.ndarray:
        """Stacked ``(4, T, n)`` array in channel order v, theta, p, q."""
        return np.stack([self.v, self.theta, self.p, self.q])

    def subset(self, idx) -> "MeasurementSet":
        idx = np.asarray(idx)
        labels = None if self.truth_labels is None else self.truth_labels[idx]
        return replace(self, v=self.v[idx], theta=self.theta[idx], p=self.p[idx], q=self.q[idx],
                       truth_labels=labels)


def _check_point(spec: GridSpec, v, theta):
    v = np.asarray(v, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if v.shape[-1] != spec.n_bus or theta.shape != v.shape:
        raise ValueError(f"expected voltage arrays with trailing size {spec.n_bus}, "
                         f"got {v.shape} and {theta.shape}")
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(theta))):
        raise ValueError("voltage magnitudes and angles must be finite")
    return v, theta


def injections(spec: GridSpec, params: StateParams, v, theta):
    """Real and reactive injections accumulated branch by branch.

    Accepts a single point or a batch with trailing bus axis.
    """
    params.check(spec)
    v, theta = _check_point(spec, v, theta)
    a, c = spec.from_idx, spec.to_idx
    g, b = params.g, params.b
    va, vc = v[..., a], v[..., c]
    dth = theta[..., a] - theta[..., c]
    vv = va * vc
    cos, sin = vv * np.cos(dth), vv * np.sin(dth)
    p_from = g * (va**2 - cos) - b * sin
    p_to = g * (vc**2 - cos) + b * sin
    q_from = b * (cos - va**2) - g * sin
    q_to = b * (cos - vc**2) + g * sin
    F = np.zeros((spec.n_branch, spec.n_bus))
    F[np.arange(spec.n_branch), a] = 1.0
    Tm = np.zeros_like(F)
    Tm[np.arange(spec.n_branch), c] = 1.0
    return p_from @ F + p_to @ Tm, q_from @ F + q_to @ Tm


def injections_admittance(G, B, v, theta):
    """Injections from the bus admittance matrix, ``S = V conj(Y V)``."""
    V = np.asarray(v) * np.exp(1j * np.asarray(theta))
    Y = np.asarray(G) + 1j * np.asarray(B)
    S = V * np.conj(np.einsum("ij,...j->...i", Y, V))
    return S.real, S.imag


def powerflow_jacobian(G, B, v, theta):
    """``d[p; q] / d[v; theta]`` at a single operating point, shape ``(2n, 2n)``."""
    v = np.asarray(v, dtype=float)
    V = v * np.exp(1j * np.asarray(theta, dtype=float))
    Y = np.asarray(G) + 1j * np.asarray(B)
    I = Y @ V
    dS_dth = 1j * np.diag(V) @ np.conj(np.diag(I) - Y * V[None, :])
    Vn = V / v
    dS_dv = np.diag(V) @ np.conj(Y * Vn[None, :]) + np.diag(np.conj(I) * Vn)
    top = np.hstack([dS_dv.real, dS_dth.real])
    bottom = np.hstack([dS_dv.imag, dS_dth.imag])
    return np.vstack([top, bottom])


def solve_powerflow(spec: GridSpec, params: StateParams, p_spec, q_spec, *,
                    v_slack: float = 1.0, tol: float = 1e-12, max_iter: int = 50) -> OperatingPoint:
    """Newton-Raphson from flat start with all non-slack buses as PQ buses.

    ``p_spec``/``q_spec`` are net injections; entries at the slack bus are
    ignored and replaced by the computed slack injection.
    """
    params.check(spec)
    n = spec.n_bus
    p_spec = np.asarray(p_spec, dtype=float)
    q_spec = np.asarray(q_spec, dtype=float)
    if p_spec.shape != (n,) or q_spec.shape != (n,):
        raise ValueError(f"specified injections must have length {n}")
    if not is_connected(spec, params):
        raise PowerFlowError("network is disconnected under the given parameters")

    G, B = assemble_admittance(spec, params)
    pq = np.array([i for i in range(n) if i != spec.slack_idx])
    v = np.ones(n)
    v[spec.slack_idx] = v_slack
    theta = np.zeros(n)
    target = np.concatenate([p_spec[pq], q_spec[pq]])
    rows = np.concatenate([pq, n + pq])
    cols = np.concatenate([pq, n + pq])

    for it in range(max_iter + 1):
        p, q = injections_admittance(G, B, v, theta)
        mismatch = np.concatenate([p[pq], q[pq]]) - target
        if np.max(np.abs(mismatch), initial=0.0) < tol:
            break
        if it == max_iter:
            raise PowerFlowError(f"Newton did not converge in {max_iter} iterations "
                                 f"(mismatch {np.max(np.abs(mismatch)):.3e})")
        J = powerflow_jacobian(G, B, v, theta)[np.ix_(rows, cols)]
        try:
            dx = np.linalg.solve(J, -mismatch)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError("singular power-flow Jacobian") from exc
        v[pq] += dx[: pq.size]
        theta[pq] += dx[pq.size:]
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise PowerFlowError("Newton iterate left the feasible region")

    p, q = injections_admittance(G, B, v, theta)
    return OperatingPoint(v, theta, p, q)


@dataclass(frozen=True)
class LoadProfile:
    """Synthetic per-bus loads: base consumption times ``1 + cv * N(0, 1)``."""

    base_p: np.ndarray
    base_q: np.ndarray
    cv: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "base_p", np.asarray(self.base_p, dtype=float))
        object.__setattr__(self, "base_q", np.asarray(self.base_q, dtype=float))
        if self.base_p.shape != self.base_q.shape:
            raise ValueError("base_p and base_q must have the same length")
        if self.cv < 0:
            raise ValueError("cv must be non-negative")

    def draw(self, rng: np.random.Generator):
        z = rng.standard_normal((2, self.base_p.size))
        return self.base_p * (1 + self.cv * z[0]), self.base_q * (1 + self.cv * z[1])


def expand_schedule(runs: Sequence[tuple[int, int]], mode: str = "random", seed: int | None = None) -> np.ndarray:
    """Expand a run-length schedule ``[(state, count), ...]`` into labels.

    ``mode="blocks"`` keeps the runs contiguous; ``"random"`` shuffles the
    expanded labels so each timestamp draws its state at random while the
    state counts stay exact.
    """
    labels = np.concatenate([np.full(int(count), int(state)) for state, count in runs]) \
        if runs else np.zeros(0, dtype=int)
    if mode == "random":
        np.random.default_rng(seed).shuffle(labels)
    elif mode != "blocks":
        raise ValueError(f"unknown schedule mode {mode!r}")
    return labels.astype(int)


def generate_scenario(spec: GridSpec, states: Sequence[StateParams], schedule, loads: LoadProfile,
                      seed: int) -> MeasurementSet:
    """Noise-free operating points, one power-flow solve per timestamp.

    Each timestamp gets its own RNG stream spawned from ``seed``, so results
    do not depend on evaluation order.
    """
    if not states:
        raise ValueError("at least one system state is required")
    for s in states:
        s.check(spec, physical=True)
    schedule = np.asarray(schedule, dtype=int)
    if schedule.ndim != 1:
        raise ValueError("schedule must be one-dimensional")
    if schedule.size and (schedule.min() < 0 or schedule.max() >= len(states)):
        raise ValueError("schedule refers to a state that was not given")
    if loads.base_p.size != spec.n_bus:
        raise ValueError(f"load profile has {loads.base_p.size} buses, grid has {spec.n_bus}")

    T, n = schedule.size, spec.n_bus
    out = np.zeros((4, T, n))
    streams = np.random.SeedSequence(seed).spawn(T)
    for t, (k, ss) in enumerate(zip(schedule, streams)):
        p_load, q_load = loads.draw(np.random.default_rng(ss))
        try:
            op = solve_powerflow(spec, states[k], -p_load, -q_load)
        except PowerFlowError as exc:
            raise PowerFlowError(f"timestamp {t} (state {k}): {exc}") from exc
        out[:, t] = op.v, op.theta, op.p, op.q
    return MeasurementSet(*out, truth_labels=schedule, truth_params=list(states), seed=seed)


def _per_channel(rel_std) -> np.ndarray:
    if isinstance(rel_std, Mapping):
        unknown = set(rel_std) - set(CHANNELS)
        if unknown:
            raise ValueError(f"unknown noise channels {sorted(unknown)}")
        rel = np.array([float(rel_std.get(c, 0.0)) for c in CHANNELS])
    else:
        rel = np.broadcast_to(np.asarray(rel_std, dtype=float), (4,)).copy()
    if np.any(rel < 0) or not np.all(np.isfinite(rel)):
        raise ValueError("relative noise levels must be finite and non-negative")
    return rel


def noise_scale(ms: MeasurementSet, rel_std) -> np.ndarray:
    """Absolute noise std per channel and bus, ``(4, n)``.

    The scale is ``rel_std`` times the standard deviation of each channel's
    historical series.
    """
    rel = _per_channel(rel_std)
    return rel[:, None] * ms.channels().std(axis=1)


def add_noise(ms: MeasurementSet, rel_std, seed: int) -> MeasurementSet:
    """Perturb every channel with independent zero-mean Gaussian noise."""
    rel = _per_channel(rel_std)
    scale = noise_scale(ms, rel)
    rng = np.random.default_rng(seed)
    noisy = ms.channels() + scale[:, None, :] * rng.standard_normal((4, ms.T, ms.n_bus))
    return replace(ms, v=noisy[0], theta=noisy[1], p=noisy[2], q=noisy[3],
                   noise_std=dict(zip(CHANNELS, rel.tolist())), abs_std=scale)
