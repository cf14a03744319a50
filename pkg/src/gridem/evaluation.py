"""Scoring an estimate against ground truth: state matching, accuracy, errors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .grid import StateParams

UNMATCHED_NOTE = ("clusters without a truth partner are scored against their individually "
                  "closest truth state, and truth states without a cluster against their closest cluster")


def _beta(p) -> np.ndarray:
    return p.beta if isinstance(p, StateParams) else np.asarray(p, dtype=float)


def mse_matrix(estimated, truth) -> np.ndarray:
    """``(K, K')`` mean squared error of ``[g; b]`` between every pair."""
    E = np.stack([_beta(p) for p in estimated])
    R = np.stack([_beta(p) for p in truth])
    return np.mean((E[:, None, :] - R[None, :, :]) ** 2, axis=2)


def match_states(estimated, truth) -> np.ndarray:
    """Truth index for each estimated cluster, ``-1`` where it stays unpaired.

    The pairing minimizes the total parameter MSE over injective mappings.
    """
    cost = mse_matrix(estimated, truth)
    rows, cols = linear_sum_assignment(cost)
    match = np.full(len(estimated), -1)
    match[rows] = cols
    return match


def f1_score(est: set, true: set) -> float:
    if not est and not true:
        return 1.0
    tp = len(est & true)
    if tp == 0:
        return 0.0
    precision, recall = tp / len(est), tp / len(true)
    return 2 * precision * recall / (precision + recall)


@dataclass
class EvalReport:
    state_match: np.ndarray
    label_accuracy: float
    param_mse: np.ndarray           # per truth state
    pooled_mse: float
    param_rel_err: list             # per truth state: (n_edges, 2) relative errors of (g, b)
    true_edges: list
    topology_f1: np.ndarray
    topology_exact: np.ndarray
    notes: list = field(default_factory=list)

    @property
    def max_g_rel_err(self) -> float:
        return max((float(e[:, 0].max()) for e in self.param_rel_err if e.size), default=0.0)

    @property
    def all_topologies_exact(self) -> bool:
        return bool(np.all(self.topology_exact))

    def to_dict(self, spec=None) -> dict:
        def edge_name(j):
            return list(spec.branches[j]) if spec is not None else int(j)

        return {
            "notes": self.notes,
            "state_match": self.state_match.tolist(),
            "label_accuracy": self.label_accuracy,
            "pooled_mse": self.pooled_mse,
            "states": [
                {
                    "param_mse": float(self.param_mse[j]),
                    "topology_f1": float(self.topology_f1[j]),
                    "topology_exact": bool(self.topology_exact[j]),
                    "edges": [edge_name(e) for e in self.true_edges[j]],
                    "g_rel_err": self.param_rel_err[j][:, 0].tolist(),
                    "b_rel_err": self.param_rel_err[j][:, 1].tolist(),
                }
                for j in range(len(self.param_mse))
            ],
        }


def evaluate(params, edges, labels, truth_params, truth_labels, *, edge_atol: float = 0.0) -> EvalReport:
    """Score estimated clusters against truth states.

    ``params``/``edges``/``labels`` describe the estimate (0-based labels);
    truth edges are the branches with nonzero parameters.
    """
    K, K_true = len(params), len(truth_params)
    cost = mse_matrix(params, truth_params)
    match = match_states(params, truth_params)
    notes = []
    if K != K_true:
        notes.append(f"K={K} estimated vs {K_true} true states: {UNMATCHED_NOTE}")

    # cluster -> scored truth state; truth state -> scored cluster
    to_truth = np.where(match >= 0, match, np.argmin(cost, axis=1))
    partner = np.full(K_true, -1)
    partner[match[match >= 0]] = np.flatnonzero(match >= 0)
    partner = np.where(partner >= 0, partner, np.argmin(cost, axis=0))

    labels = np.asarray(labels)
    truth_labels = np.asarray(truth_labels)
    if labels.shape != truth_labels.shape:
        raise ValueError(f"{labels.size} estimated labels vs {truth_labels.size} true labels")
    accuracy = float(np.mean(to_truth[labels] == truth_labels)) if labels.size else 1.0

    mse = cost[partner, np.arange(K_true)]
    freq = np.bincount(truth_labels, minlength=K_true).astype(float)
    pooled = float(np.average(mse, weights=freq)) if freq.sum() else float(mse.mean())

    rel, true_edges, f1, exact = [], [], [], []
    for j, tp in enumerate(truth_params):
        est = params[partner[j]]
        e_true = sorted(tp.edges(edge_atol))
        with np.errstate(divide="ignore", invalid="ignore"):
            rg = np.abs(est.g[e_true] - tp.g[e_true]) / np.abs(tp.g[e_true])
            rb = np.abs(est.b[e_true] - tp.b[e_true]) / np.abs(tp.b[e_true])
        rel.append(np.column_stack([rg, rb]) if e_true else np.zeros((0, 2)))
        true_edges.append(e_true)
        est_edges = set(edges[partner[j]])
        f1.append(f1_score(est_edges, set(e_true)))
        exact.append(est_edges == set(e_true))
    return EvalReport(match, accuracy, mse, pooled, rel, true_edges, np.array(f1), np.array(exact), notes)


def evaluate_solution(sol, truth_params, truth_labels) -> EvalReport:
    return evaluate(sol.params, sol.edges, sol.labels, truth_params, truth_labels)
