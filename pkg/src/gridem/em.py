"""Expectation-maximization over latent system-state labels."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .eiv import RegressionData
from .glra import GLRAError, fit_cluster
from .grid import StateParams
from .likelihood import batch_log_density, log_normalizers, quad_residuals

log = logging.getLogger(__name__)


class EMError(RuntimeError):
    pass


@dataclass(frozen=True)
class EMConfig:
    K: int
    max_iters: int = 50
    rel_tol: float = 1e-6
    seed: int = 0
    empty_cluster_policy: str = "reinit"
    n_restarts: int = 1
    tau_rel: float = 0.05
    refine: bool = True
    refine_steps: int = 3
    split_merge: int = 3
    split_ratio: float = 2.0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if self.empty_cluster_policy not in ("reinit", "merge"):
            raise ValueError(f"unknown empty_cluster_policy {self.empty_cluster_policy!r}")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be at least 1")
        if not 0 < self.tau_rel < 1:
            raise ValueError("tau_rel must lie in (0, 1)")
        if self.refine_steps < 1:
            raise ValueError("refine_steps must be at least 1")
        if self.split_merge < 0:
            raise ValueError("split_merge must be non-negative")
        if not self.split_ratio > 1:
            raise ValueError("split_ratio must exceed 1")


@dataclass
class EMSolution:
    params: list[StateParams]
    edges: list[frozenset]
    phi: np.ndarray
    Q: np.ndarray
    labels: np.ndarray
    trace: list[float]
    iterations_used: int
    converged: bool
    label_history: np.ndarray = field(repr=False, default=None)
    param_history: np.ndarray = field(repr=False, default=None)
    reinit_iterations: list[int] = field(default_factory=list)
    move_iterations: list[int] = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.params)

    @property
    def objective(self) -> float:
        return self.trace[-1] if self.trace else -np.inf


def e_init(T: int, K: int, seed) -> np.ndarray:
    """Random responsibilities: interval lengths of ``K - 1`` sorted uniform cuts of ``[0, 1]``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cuts = np.sort(rng.uniform(0.0, 1.0, size=(T, K - 1)), axis=1)
    edges = np.concatenate([np.zeros((T, 1)), cuts, np.ones((T, 1))], axis=1)
    return np.diff(edges, axis=1)


def posterior(log_density, phi):
    """Row-normalized responsibilities and per-row log evidence.

    ``log_density`` is ``(T, K)``; zero prior weight removes a cluster.
    """
    log_density = np.asarray(log_density, dtype=float)
    phi = np.asarray(phi, dtype=float)
    with np.errstate(divide="ignore"):
        joint = log_density + np.log(phi)[None, :]
    evidence = logsumexp(joint, axis=1)
    bad = np.flatnonzero(~np.isfinite(evidence))
    if bad.size:
        raise EMError(f"timestamp {bad[0]} is impossible under every cluster")
    Q = np.exp(joint - evidence[:, None])
    return Q, evidence


def phi_update(Q) -> np.ndarray:
    return np.asarray(Q, dtype=float).mean(axis=0)


def get_labels(Q) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest index."""
    return np.argmax(np.asarray(Q), axis=1)


def _betas(params) -> np.ndarray:
    return np.stack([p.beta if isinstance(p, StateParams) else np.asarray(p, dtype=float) for p in params])


def cluster_log_density(params, data: RegressionData, normalizers=None) -> np.ndarray:
    """``(T, K)`` conditional log-densities of every sample under every cluster."""
    if normalizers is None:
        normalizers = log_normalizers(data)
    return np.stack([batch_log_density(data, beta, normalizers) for beta in _betas(params)], axis=1)


def e_step(params, phi, data: RegressionData, normalizers=None):
    """Responsibilities ``Q`` (T x K) and the total log-likelihood."""
    Q, evidence = posterior(cluster_log_density(params, data, normalizers), phi)
    return Q, float(evidence.sum())


def min_cluster_weight(data: RegressionData) -> float:
    """Smallest ``sum_t Q_t(k)`` giving at least ``2m + 1`` equation rows."""
    return (data.n_params + 1) / (2 * data.spec.n_bus)


def m_step(Q, data: RegressionData, previous=None, *, refine: bool = True, max_steps: int = 30):
    """Mixture weights and per-cluster parameters for fixed responsibilities.

    Returns ``(betas (K, 2m), phi, starved)`` where ``starved`` lists clusters
    whose total weight is too small to fit; their rows are NaN.
    """
    Q = np.asarray(Q, dtype=float)
    phi = phi_update(Q)
    K = Q.shape[1]
    betas = np.full((K, data.n_params), np.nan)
    starved = []
    need = min_cluster_weight(data)
    for k in range(K):
        if Q[:, k].sum() < need:
            starved.append(k)
            continue
        start = None if previous is None or np.isnan(previous[k]).any() else previous[k]
        try:
            betas[k], _ = fit_cluster(data, Q[:, k], start, refine_fit=refine, max_steps=max_steps)
        except GLRAError as exc:
            log.warning("cluster %d could not be fitted: %s", k, exc)
            starved.append(k)
    if len(starved) == K:
        raise EMError("every cluster is empty")
    return betas, phi, starved


def extract_topology(g, b, tau_rel: float = 0.05) -> frozenset:
    """Branches whose admittance magnitude reaches ``tau_rel`` of the largest one."""
    if not 0 < tau_rel < 1:
        raise ValueError("tau_rel must lie in (0, 1)")
    mag = np.hypot(np.asarray(g, dtype=float), np.asarray(b, dtype=float))
    top = mag.max(initial=0.0)
    if top == 0:
        return frozenset()
    return frozenset(np.flatnonzero(mag >= tau_rel * top).tolist())


def floor_variances(data: RegressionData, rel: float = 1e-12, absolute: float = 1e-24) -> RegressionData:
    """Give zero-variance channels a tiny variance so every density stays finite."""
    var = data.var_direct
    top = var.max()
    floor = rel * top if top > 0 else absolute
    if np.all(var >= floor):
        return data
    return RegressionData(data.spec, data.X, data.y, data.h, data.l, np.maximum(var, floor))


@dataclass
class _Segment:
    """State of one plain EM run."""

    Q: np.ndarray
    betas: np.ndarray
    phi: np.ndarray
    trace: list
    labels: list
    params: list
    reinit: list
    converged: bool

    @property
    def ll(self) -> float:
        return self.trace[-1]


def _em_loop(Q, data: RegressionData, config: EMConfig, rng, normalizers, betas=None) -> _Segment:
    """Alternate M- and E-steps from responsibilities ``Q`` until convergence."""
    T = data.T
    Q = Q.copy()
    seg = _Segment(Q, betas, None, [], [], [], [], False)
    for it in range(1, config.max_iters + 1):
        betas_new, phi, starved = m_step(Q, data, betas, refine=config.refine, max_steps=config.refine_steps)
        if config.split_merge and betas is not None:
            # keeping the previous estimate of a starved cluster is a valid
            # generalized M-step; the split-merge moves reuse the cluster later
            held = [k for k in starved if not np.isnan(betas[k]).any()]
            betas_new[held] = betas[held]
            starved = [k for k in starved if k not in held]
        while starved:
            if config.empty_cluster_policy == "merge":
                keep = [k for k in range(Q.shape[1]) if k not in starved]
                log.info("iteration %d: merging away starved clusters %s", it, starved)
                Q = Q[:, keep]
                Q /= Q.sum(axis=1, keepdims=True)
                betas = None if betas is None else betas[keep]
            else:
                log.info("iteration %d: reinitializing starved clusters %s", it, starved)
                fresh = e_init(T, Q.shape[1], rng)
                Q[:, starved] = fresh[:, starved]
                Q /= Q.sum(axis=1, keepdims=True)
            seg.reinit.append(it)
            betas_new, phi, starved = m_step(Q, data, betas, refine=config.refine, max_steps=config.refine_steps)
        betas = betas_new
        Q, ll = e_step(betas, phi, data, normalizers)
        seg.trace.append(ll)
        seg.labels.append(get_labels(Q))
        seg.params.append(betas.copy())
        if len(seg.trace) > 1 and abs(seg.trace[-1] - seg.trace[-2]) < config.rel_tol * abs(seg.trace[-2]):
            seg.converged = True
            break
    seg.Q, seg.betas, seg.phi = Q, betas, phi
    return seg


def fit_ratios(Q, betas, data: RegressionData) -> np.ndarray:
    """Responsibility-weighted mean projection distance per cluster over ``2n``.

    Close to one for a cluster that describes its samples; a cluster
    covering several states scores far higher.
    """
    Q = np.asarray(Q)
    out = np.full(Q.shape[1], np.nan)
    for k, beta in enumerate(betas):
        w = Q[:, k]
        keep = w > 1e-12 * max(w.max(), 1e-300)
        if not keep.any():
            continue
        quad = quad_residuals(data.subset(np.flatnonzero(keep)), beta)
        out[k] = np.sum(w[keep] * quad) / (w[keep].sum() * 2 * data.spec.n_bus)
    return out


def split_merge_candidate(Q, betas, ratios, rng):
    """Responsibilities after merging the most redundant cluster into its nearest
    neighbour and splitting the worst-fitting cluster at random into two.

    Returns ``None`` when no cluster can be freed.
    """
    K = Q.shape[1]
    mass = Q.sum(axis=0)
    occupied = (mass >= 1e-3 * Q.shape[0]) & np.isfinite(ratios)
    if K < 2 or not occupied.any():
        return None
    worst = int(np.argmax(np.where(occupied, ratios, -np.inf)))
    norms = np.linalg.norm(betas, axis=1)
    dist = np.linalg.norm(betas[:, None] - betas[None], axis=2) / np.sqrt(np.outer(norms, norms) + 1e-300)
    np.fill_diagonal(dist, np.inf)
    # a nearly empty cluster is the cheapest one to free
    score = np.where(occupied, dist.min(axis=1), -np.inf)
    score[worst] = np.inf
    if K == 2:
        free = 1 - worst
        target = worst
    else:
        free = int(np.argmin(score))
        target = int(np.argmin(dist[free]))
    Q = Q.copy()
    Q[:, target] += Q[:, free]
    u = rng.uniform(size=Q.shape[0])
    Q[:, free] = u * Q[:, worst]
    Q[:, worst] *= 1 - u
    Q = np.clip(Q, 0.0, 1.0)
    return Q / Q.sum(axis=1, keepdims=True)


def _run_once(data: RegressionData, config: EMConfig, rng: np.random.Generator, normalizers) -> EMSolution:
    seg = _em_loop(e_init(data.T, config.K, rng), data, config, rng, normalizers)
    trace, labels_hist, params_hist = list(seg.trace), list(seg.labels), list(seg.params)
    reinit = list(seg.reinit)
    moves = []
    for attempt in range(config.split_merge):
        ratios = fit_ratios(seg.Q, seg.betas, data)
        occupied = seg.Q.sum(axis=0) >= 1e-3 * data.T
        if not np.any(ratios[occupied] > config.split_ratio):
            break
        Q_new = split_merge_candidate(seg.Q, seg.betas, ratios, rng)
        if Q_new is None:
            break
        cand = _em_loop(Q_new, data, config, rng, normalizers)
        gain = cand.ll - seg.ll
        log.info("split-merge attempt %d: log-likelihood %.6g -> %.6g", attempt, seg.ll, cand.ll)
        if gain > config.rel_tol * abs(seg.ll):
            seg = cand
            trace.append(cand.ll)
            labels_hist.append(cand.labels[-1])
            params_hist.append(cand.params[-1])
            moves.append(len(trace))

    labels = get_labels(seg.Q)
    final = []
    for k in range(seg.betas.shape[0]):
        hard = (labels == k).astype(float)
        try:
            beta, _ = fit_cluster(data, hard, seg.betas[k], refine_fit=config.refine)
        except GLRAError:
            beta = seg.betas[k]
        final.append(StateParams.from_beta(beta))
    edges = [extract_topology(p.g, p.b, config.tau_rel) for p in final]
    return EMSolution(final, edges, seg.phi, seg.Q, labels, trace, len(trace), seg.converged,
                      np.array(labels_hist), np.array(params_hist), reinit, moves)


def run_em(data: RegressionData, config: EMConfig) -> EMSolution:
    """Fit ``config.K`` system states; best of ``n_restarts`` by final log-likelihood."""
    need = config.K * (data.n_params + 1)
    if data.T * 2 * data.spec.n_bus < need:
        log.warning("only %d equation rows for %d clusters of %d parameters",
                    data.T * 2 * data.spec.n_bus, config.K, data.n_params)
    data = floor_variances(data)
    normalizers = log_normalizers(data)
    streams = np.random.SeedSequence(config.seed).spawn(config.n_restarts)
    best = None
    for r, ss in enumerate(streams):
        try:
            sol = _run_once(data, config, np.random.default_rng(ss), normalizers)
        except (EMError, GLRAError) as exc:
            raise EMError(f"restart {r}: {exc}") from exc
        log.info("restart %d: log-likelihood %.6g after %d iterations", r, sol.objective, sol.iterations_used)
        if best is None or sol.objective > best.objective:
            best = sol
    return best
