"""Joint topology and line-parameter estimation for distribution grids with
several unknown system states (errors-in-variables regression inside EM)."""

from .em import EMConfig, EMSolution, run_em
from .grid import GridSpec, StateParams, assemble_admittance, build_incidence
from .io import bundled_scenario, load_grid, load_scenario
from .pipeline import estimate, regression_data, simulate

__all__ = [
    "EMConfig", "EMSolution", "GridSpec", "StateParams", "assemble_admittance", "build_incidence",
    "bundled_scenario", "estimate", "load_grid", "load_scenario", "regression_data", "run_em", "simulate",
]

__version__ = "0.1.0"
