"""Grid structure: candidate branch set, incidence matrices and bus admittance."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np


class GridError(ValueError):
    """Invalid grid structure or mismatched parameter dimensions."""


def build_incidence(branches: Sequence[tuple[int, int]], n_bus: int):
    """Branch-by-bus incidence matrix ``S`` and from/to index matrix ``U``.

    Buses are numbered from 1. Row ``i`` of ``S`` holds +1 at the from bus and
    -1 at the to bus of branch ``i``; ``U[i] = (from, to)``.
    """
    n_bus = int(n_bus)
    if n_bus < 1:
        raise GridError(f"n_bus must be positive, got {n_bus}")
    seen = set()
    m = len(branches)
    S = np.zeros((m, n_bus))
    U = np.zeros((m, 2), dtype=int)
    for i, (a, c) in enumerate(branches):
        a, c = int(a), int(c)
        if a == c:
            raise GridError(f"branch {i} is a self-loop at bus {a}")
        for bus in (a, c):
            if not 1 <= bus <= n_bus:
                raise GridError(f"branch {i} references bus {bus} outside [1, {n_bus}]")
        key = frozenset((a, c))
        if key in seen:
            raise GridError(f"duplicate branch ({a}, {c})")
        seen.add(key)
        S[i, a - 1] = 1.0
        S[i, c - 1] = -1.0
        U[i] = (a, c)
    return S, U


@dataclass(frozen=True)
class GridSpec:
    """Bus count, candidate branches and slack bus of a grid.

    Branch orientation is normalized to ``from < to``; the order of the
    candidate list is preserved and defines the parameter layout.
    """

    n_bus: int
    branches: tuple[tuple[int, int], ...]
    slack_bus: int = 1
    S: np.ndarray = field(init=False, repr=False, compare=False)
    U: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        norm = tuple((min(int(a), int(c)), max(int(a), int(c))) for a, c in self.branches)
        S, U = build_incidence(norm, self.n_bus)
        if not 1 <= int(self.slack_bus) <= int(self.n_bus):
            raise GridError(f"slack bus {self.slack_bus} outside [1, {self.n_bus}]")
        S.setflags(write=False)
        U.setflags(write=False)
        object.__setattr__(self, "n_bus", int(self.n_bus))
        object.__setattr__(self, "slack_bus", int(self.slack_bus))
        object.__setattr__(self, "branches", norm)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "U", U)

    @classmethod
    def complete(cls, n_bus: int, slack_bus: int = 1) -> "GridSpec":
        """All ``n(n-1)/2`` possible connections as candidates."""
        return cls(n_bus, tuple(combinations(range(1, n_bus + 1), 2)), slack_bus)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def from_idx(self) -> np.ndarray:
        """0-based from-bus index per branch."""
        return self.U[:, 0] - 1

    @property
    def to_idx(self) -> np.ndarray:
        return self.U[:, 1] - 1

    @property
    def slack_idx(self) -> int:
        return self.slack_bus - 1

    def branch_index(self, a: int, c: int) -> int:
        key = (min(a, c), max(a, c))
        try:
            return self.branches.index(key)
        except ValueError:
            raise GridError(f"({a}, {c}) is not a candidate branch") from None


@dataclass(frozen=True)
class StateParams:
    """Per-branch conductance ``g`` and susceptance ``b`` of one system state."""

    g: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        g = np.array(self.g, dtype=float).reshape(-1)
        b = np.array(self.b, dtype=float).reshape(-1)
        if g.shape != b.shape:
            raise GridError(f"g has length {g.size} but b has length {b.size}")
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(b))):
            raise GridError("line parameters must be finite")
        g.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "b", b)

    @classmethod
    def from_beta(cls, beta) -> "StateParams":
        beta = np.asarray(beta, dtype=float)
        m = beta.size // 2
        if beta.size != 2 * m:
            raise GridError("stacked parameter vector must have even length")
        return cls(beta[:m], beta[m:])

    @classmethod
    def from_lines(cls, spec: GridSpec, lines: Iterable[tuple[int, int, float, float]]) -> "StateParams":
        """Build from ``(from, to, g, b)`` tuples; unlisted candidates are zero."""
        g = np.zeros(spec.n_branch)
        b = np.zeros(spec.n_branch)
        for a, c, gj, bj in lines:
            j = spec.branch_index(int(a), int(c))
            g[j], b[j] = gj, bj
        return cls(g, b)

    @property
    def beta(self) -> np.ndarray:
        """Stacked ``[g; b]``."""
        return np.concatenate([self.g, self.b])

    def check(self, spec: GridSpec, physical: bool = False) -> None:
        if self.g.size != spec.n_branch:
            raise GridError(f"expected {spec.n_branch} branch parameters, got {self.g.size}")
        if physical and np.any(self.g < 0):
            raise GridError("conductance must be non-negative")

    def edges(self, atol: float = 0.0) -> frozenset[int]:
        """Indices of branches with nonzero parameters."""
        mag = np.hypot(self.g, self.b)
        return frozenset(np.flatnonzero(mag > atol).tolist())


def assemble_admittance(spec: GridSpec, params: StateParams):
    """Bus conductance and susceptance matrices ``(G, B)`` without shunts."""
    params.check(spec)
    S = spec.S
    G = S.T @ (params.g[:, None] * S)
    B = S.T @ (params.b[:, None] * S)
    return G, B


def is_connected(spec: GridSpec, params: StateParams, atol: float = 0.0) -> bool:
    """Whether the branches with nonzero parameters connect every bus."""
    parent = list(range(spec.n_bus))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for j in params.edges(atol):
        ra, rc = find(spec.from_idx[j]), find(spec.to_idx[j])
        parent[ra] = rc
    return len({find(i) for i in range(spec.n_bus)}) == 1
