"""Responsibility-weighted errors-in-variables regression.

``weighted_tls`` is the closed-form low-rank approximation: the samples'
equation rows are stacked vertically into ``[A | y]``, each row whitened by a
scalar noise level and scaled by the square root of its sample weight, and
the parameters are read off the right singular vector of the smallest
singular value, normalized to ``[beta; -1]``. Vertical stacking is what lets
one vector annihilate every sample, so the rank bound is ``2m + 1`` in the
parameter dimension.

``fit_cluster`` uses that solution as a starting point and then lowers the
exact weighted projection distance ``sum_t w_t r_t^T S_t(beta)^+ r_t`` by
Gauss-Newton steps with backtracking.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .eiv import RegressionData
from .likelihood import EIG_FLOOR, quad_residuals, solve_psd

log = logging.getLogger(__name__)


class GLRAError(ArithmeticError):
    """The low-rank problem is ill-posed for the given data and weights."""


@dataclass(frozen=True)
class WeightedEIVProblem:
    """Stacked regression samples with per-sample weights and row noise levels.

    Shapes: ``X (T, r, p)``, ``y (T, r)``, ``weights (T,)``, ``row_var (T, r)``.
    """

    X: np.ndarray
    y: np.ndarray
    weights: np.ndarray
    row_var: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        rv = np.asarray(self.row_var, dtype=float)
        if X.ndim != 3 or y.shape != X.shape[:2]:
            raise ValueError(f"X must be (T, r, p) and y (T, r); got {X.shape} and {y.shape}")
        if w.shape != (X.shape[0],):
            raise ValueError("weights must have one entry per sample")
        if np.any(w < 0) or np.any(w > 1) or not np.all(np.isfinite(w)):
            raise ValueError("weights must lie in [0, 1]")
        rv = np.broadcast_to(rv, y.shape)
        if np.any(rv < 0):
            raise ValueError("row variances must be non-negative")
        for name, val in (("X", X), ("y", y), ("weights", w), ("row_var", rv)):
            object.__setattr__(self, name, val)

    @classmethod
    def from_data(cls, data: RegressionData, weights) -> "WeightedEIVProblem":
        return cls(data.X, data.y, weights, data.row_variances())


@dataclass(frozen=True)
class TLSResult:
    beta: np.ndarray
    objective: float
    singular_values: np.ndarray
    degenerate: bool = False


def weighted_tls(problem: WeightedEIVProblem) -> TLSResult:
    """Closed-form weighted total least squares; returns ``[g; b]`` and the distance."""
    T, r, p = problem.X.shape
    w = problem.weights
    if not np.any(w > 0):
        raise GLRAError("all weights are zero")
    if w.sum() * r < p + 1:
        raise GLRAError(f"effective row count {w.sum() * r:.1f} is below {p + 1}")
    keep = w > 0
    X, y, w, rv = problem.X[keep], problem.y[keep], w[keep], problem.row_var[keep]

    positive = rv[rv > 0]
    floor = EIG_FLOOR * positive.mean() if positive.size else 1.0
    scale = np.sqrt(w)[:, None] / np.sqrt(np.maximum(rv, floor))
    M = np.concatenate([X, y[:, :, None]], axis=2) * scale[:, :, None]
    M = M.reshape(-1, p + 1)
    # a thin QR keeps the SVD at (p+1) x (p+1) for tall stacks
    if M.shape[0] > 4 * (p + 1):
        M = np.linalg.qr(M, mode="r")
    _, s, Vt = np.linalg.svd(M, full_matrices=True)
    s_full = np.zeros(p + 1)
    s_full[: s.size] = s
    smin = s_full[-1]
    tie = 1e-10 * max(s_full[0], 1e-300)
    null = np.flatnonzero(s_full - smin <= tie)
    degenerate = null.size > 1
    if degenerate:
        log.warning("smallest singular value has multiplicity %d; using the tie-break rule", null.size)
        basis = Vt[null].T
        vec = basis @ basis[-1]
        vec /= np.linalg.norm(vec)
    else:
        vec = Vt[-1]
    if abs(vec[-1]) < 1e-12:
        raise GLRAError("null vector has no output component; parameters are not identifiable")
    beta = vec[:-1] / -vec[-1]
    return TLSResult(beta, float(smin**2), s_full, degenerate)


def projection_objective(data: RegressionData, weights, beta) -> float:
    """Weighted sum of projection distances ``sum_t w_t r_t^T S_t^+ r_t``."""
    w = np.asarray(weights, dtype=float)
    keep = w > 0
    quad = quad_residuals(data.subset(np.flatnonzero(keep)), beta)
    return float(np.sum(w[keep] * quad))


def _gauss_newton_step(data: RegressionData, w, beta):
    """Gauss-Newton step for the joint fit of ``beta`` and the voltage corrections.

    With the corrections eliminated at their optimum the Schur complement of
    the normal equations is ``sum_t w_t X*_t^T S_t^-1 X*_t`` and the
    right-hand side ``sum_t w_t X*_t^T lam_t``, where ``X*_t`` is the
    projected regressor matrix.
    """
    n2 = 2 * data.spec.n_bus
    _, lam, S, A = quad_residuals(data, beta, return_multipliers=True)
    delta = -data.var_direct[:, :n2] * (np.swapaxes(A, 1, 2) @ lam[:, :, None])[:, :, 0]
    X_star = data.X - data.error_from_phi(delta)
    SinvX, _ = solve_psd(S, X_star)
    p = data.n_params
    WX = (X_star * w[:, None, None]).reshape(-1, p)
    M = WX.T @ SinvX.reshape(-1, p)
    rhs = WX.T @ lam.ravel()
    step, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    return step


def refine(data: RegressionData, weights, beta0, *, max_iter: int = 30, rtol: float = 1e-12,
           prune: float = 1e-8):
    """Monotone Gauss-Newton descent on the exact weighted projection distance.

    Steps are computed from the samples whose weight exceeds ``prune`` times
    the largest one; every step is accepted against the full objective, so
    the returned objective never exceeds the starting value.
    Returns ``(beta, objective)``.
    """
    w = np.asarray(weights, dtype=float)
    idx = np.flatnonzero(w > 0)
    sub, w = data.subset(idx), w[idx]
    heavy = np.flatnonzero(w > prune * w.max())
    core, w_core = (sub, w) if heavy.size == w.size else (sub.subset(heavy), w[heavy])
    beta = np.asarray(beta0, dtype=float)
    f = float(np.sum(w * quad_residuals(sub, beta)))
    for _ in range(max_iter):
        step = _gauss_newton_step(core, w_core, beta)
        t = 1.0
        for _ in range(12):
            cand = beta + t * step
            fc = float(np.sum(w * quad_residuals(sub, cand)))
            if fc <= f:
                break
            t *= 0.5
        else:
            break
        improvement = f - fc
        beta, f = cand, fc
        if improvement <= rtol * max(abs(f), 1e-300):
            break
    return beta, f


def fit_cluster(data: RegressionData, weights, start=None, *, refine_fit: bool = True,
                max_steps: int = 30):
    """Parameter update for one cluster.

    The closed-form weighted TLS solution and, when given, the previous
    estimate ``start`` are compared by projection distance; the better one is
    refined by at most ``max_steps`` Gauss-Newton steps. The returned
    objective therefore never exceeds that of ``start``.
    """
    w = np.asarray(weights, dtype=float)
    tls = weighted_tls(WeightedEIVProblem.from_data(data, w))
    cands = [tls.beta] if start is None else [tls.beta, np.asarray(start, dtype=float)]
    objs = [projection_objective(data, w, c) for c in cands]
    best = int(np.argmin(objs))
    beta, f = cands[best], objs[best]
    if refine_fit and np.isfinite(f):
        beta, f = refine(data, w, beta, max_iter=max_steps)
    return beta, f
