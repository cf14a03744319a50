"""End-to-end helpers shared by the CLI and the sweeps."""

from __future__ import annotations

import numpy as np

from .eiv import RegressionData, direct_variances, prepare
from .em import EMConfig, EMSolution, run_em
from .grid import GridSpec
from .io import Scenario
from .powerflow import CHANNELS, MeasurementSet, add_noise, expand_schedule, generate_scenario


def balanced_schedule(n_states: int, T: int) -> list[tuple[int, int]]:
    """``T`` timestamps split as evenly as possible over ``n_states`` states."""
    base, extra = divmod(T, n_states)
    return [(k, base + (k < extra)) for k in range(n_states)]


def simulate(sc: Scenario, T: int | None = None, noise=None, n_states: int | None = None,
             seed: int | None = None) -> MeasurementSet:
    """Noisy measurements for a scenario.

    ``T`` and ``n_states`` override the configured schedule with a balanced
    one over the first ``n_states`` states; ``noise`` overrides the
    configured relative noise levels.
    """
    seed = sc.seed if seed is None else seed
    states = sc.states if n_states is None else sc.states[:n_states]
    if n_states is not None and not 1 <= n_states <= len(sc.states):
        raise ValueError(f"n_states must lie in [1, {len(sc.states)}]")
    if T is None and n_states is None:
        schedule = sc.schedule
    else:
        schedule = balanced_schedule(len(states), sc.T if T is None else T)
    labels = expand_schedule(schedule, sc.schedule_mode, seed)
    ms = generate_scenario(sc.grid, states, labels, sc.loads, seed)
    if noise is None:
        noise = sc.noise
    # the noise stream is kept apart from the load and schedule streams
    return add_noise(ms, noise, np.random.SeedSequence((seed, 1)))


def regression_data(spec: GridSpec, ms: MeasurementSet, noise=None, cov_mode: str = "per-timestamp") -> RegressionData:
    """Regression samples with direct variances.

    The recorded absolute noise levels are used when present; otherwise the
    relative ``noise`` level is applied to the measured channels' spread.
    """
    if noise is None and ms.abs_std is not None:
        var = direct_variances(ms, abs_std=ms.abs_std)
    else:
        if noise is None:
            noise = ms.noise_std or 0.0
        if isinstance(noise, dict):
            noise = [noise.get(c, 0.0) for c in CHANNELS]
        var = direct_variances(ms, rel_std=noise)
    return prepare(spec, ms, var, cov_mode=cov_mode)


def estimate(spec: GridSpec, ms: MeasurementSet, config: EMConfig, noise=None) -> EMSolution:
    return run_em(regression_data(spec, ms, noise), config)
