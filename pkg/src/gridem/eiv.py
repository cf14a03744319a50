"""Linear regression form of the power flow and first-order noise propagation.

The regressor matrix of one timestamp is ``X = [[C, D], [D, -C]]`` with
``y = [p; q] = X [g; b]``. Column ``j`` of ``C`` and ``D`` is nonzero only at
the two end buses of branch ``j``, so the gradients of those entries with
respect to the direct measurements are stored per branch and end bus:
``h[j, e]`` for ``C`` and ``l[j, e]`` for ``D``, each over the four channels
``(v_from, v_to, theta_from, theta_to)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse

from .grid import GridSpec
from .powerflow import MeasurementSet


def _endpoint_terms(spec: GridSpec, v, theta):
    a, c = spec.from_idx, spec.to_idx
    va, vc = v[..., a], v[..., c]
    dth = theta[..., a] - theta[..., c]
    return va, vc, va * vc, np.cos(dth), np.sin(dth)


def branch_entries(spec: GridSpec, v, theta):
    """Nonzero entries of ``C`` and ``D``, each of shape ``(..., m, 2)``.

    Index ``[..., j, 0]`` is the entry at the from bus of branch ``j`` and
    ``[..., j, 1]`` the entry at its to bus.
    """
    va, vc, vv, cos, sin = _endpoint_terms(spec, v, theta)
    c_ent = np.stack([va**2 - vv * cos, vc**2 - vv * cos], axis=-1)
    d_ent = np.stack([-vv * sin, vv * sin], axis=-1)
    return c_ent, d_ent


def branch_gradients(spec: GridSpec, v, theta):
    """Analytic gradients ``(h, l)`` of the ``C``/``D`` entries, ``(..., m, 2, 4)``."""
    va, vc, vv, cos, sin = _endpoint_terms(spec, v, theta)
    h = np.empty(va.shape + (2, 4))
    l = np.empty_like(h)
    # from-bus entry c = va^2 - va vc cos
    h[..., 0, 0] = 2 * va - vc * cos
    h[..., 0, 1] = -va * cos
    h[..., 0, 2] = vv * sin
    h[..., 0, 3] = -vv * sin
    # to-bus entry c = vc^2 - va vc cos
    h[..., 1, 0] = -vc * cos
    h[..., 1, 1] = 2 * vc - va * cos
    h[..., 1, 2] = vv * sin
    h[..., 1, 3] = -vv * sin
    # d = -va vc sin at the from bus, +va vc sin at the to bus
    l[..., 0, 0] = -vc * sin
    l[..., 0, 1] = -va * sin
    l[..., 0, 2] = -vv * cos
    l[..., 0, 3] = vv * cos
    l[..., 1, :] = -l[..., 0, :]
    return h, l


def _check(spec: GridSpec, v, theta):
    v = np.asarray(v, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if v.shape[-1] != spec.n_bus or theta.shape != v.shape:
        raise ValueError(f"expected trailing size {spec.n_bus}, got {v.shape} and {theta.shape}")
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(theta))):
        raise ValueError("non-finite voltage measurement")
    if np.any(v <= 0):
        raise ValueError("voltage magnitudes must be positive")
    return v, theta


def build_regressors(spec: GridSpec, v, theta) -> np.ndarray:
    """Regressor matrix ``X`` (``2n x 2m``), batched over leading axes."""
    v, theta = _check(spec, v, theta)
    c_ent, d_ent = branch_entries(spec, v, theta)
    n, m = spec.n_bus, spec.n_branch
    C = np.zeros(v.shape[:-1] + (n, m))
    D = np.zeros_like(C)
    cols = np.arange(m)
    C[..., spec.from_idx, cols] = c_ent[..., 0]
    C[..., spec.to_idx, cols] = c_ent[..., 1]
    D[..., spec.from_idx, cols] = d_ent[..., 0]
    D[..., spec.to_idx, cols] = d_ent[..., 1]
    top = np.concatenate([C, D], axis=-1)
    bottom = np.concatenate([D, -C], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def build_output(p, q) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"p and q shapes differ: {p.shape} vs {q.shape}")
    return np.concatenate([p, q], axis=-1)


def split_output(y):
    y = np.asarray(y)
    n = y.shape[-1] // 2
    return y[..., :n], y[..., n:]


def _channel_index(spec: GridSpec) -> np.ndarray:
    """Positions in ``phi = [v; theta]`` of the four channels per branch, ``(m, 4)``."""
    a, c, n = spec.from_idx, spec.to_idx, spec.n_bus
    return np.stack([a, c, n + a, n + c], axis=1)


def _diag_variances(spec: GridSpec, sigma_direct) -> np.ndarray:
    s = np.asarray(sigma_direct, dtype=float)
    n4 = 4 * spec.n_bus
    if s.ndim == 2:
        if s.shape != (n4, n4):
            raise ValueError(f"direct covariance must be {n4}x{n4}")
        if np.any(s - np.diag(np.diag(s))):
            raise ValueError("direct covariance must be diagonal")
        s = np.diag(s).copy()
    if s.shape[-1] != n4:
        raise ValueError(f"expected {n4} direct variances (v, theta, p, q per bus)")
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise ValueError("direct covariance is not positive semidefinite")
    return s


@dataclass(frozen=True)
class RegressionSample:
    X: np.ndarray
    y: np.ndarray
    t: int = 0


@dataclass(frozen=True)
class NoisePropagation:
    """Linearized noise model of one timestamp.

    ``var_direct`` is the diagonal of the direct covariance in layout
    ``[v; theta; p; q]``. Dense ``sigma_x``/``sigma_y`` are built on demand;
    the estimation path works with the branch gradients directly.
    """

    spec: GridSpec
    var_direct: np.ndarray
    h: np.ndarray
    l: np.ndarray

    @property
    def var_phi(self) -> np.ndarray:
        return self.var_direct[: 2 * self.spec.n_bus]

    @property
    def var_y(self) -> np.ndarray:
        return self.var_direct[2 * self.spec.n_bus:]

    @cached_property
    def jacobian_x(self) -> np.ndarray:
        """``d vec(X) / d phi`` with column-major ``vec``, shape ``(4nm, 2n)``."""
        spec = self.spec
        n, m = spec.n_bus, spec.n_branch
        rows2n = 2 * n
        J = np.zeros((rows2n * 2 * m, 2 * n))
        chan = _channel_index(spec)
        ends = np.stack([spec.from_idx, spec.to_idx], axis=1)
        for j in range(m):
            for e in range(2):
                i = ends[j, e]
                # C at (i, j) and -C at (n+i, m+j); D at (i, m+j) and (n+i, j)
                J[j * rows2n + i, chan[j]] += self.h[j, e]
                J[(m + j) * rows2n + n + i, chan[j]] -= self.h[j, e]
                J[(m + j) * rows2n + i, chan[j]] += self.l[j, e]
                J[j * rows2n + n + i, chan[j]] += self.l[j, e]
        return J

    @property
    def sigma_x(self) -> np.ndarray:
        J = self.jacobian_x
        return (J * self.var_phi) @ J.T

    @property
    def sigma_y(self) -> np.ndarray:
        return np.diag(self.var_y)


def propagate_covariance(spec: GridSpec, v, theta, sigma_direct) -> NoisePropagation:
    """First-order propagation of direct measurement noise at ``(v, theta)``.

    ``sigma_direct`` is a diagonal ``4n x 4n`` matrix or its diagonal.
    Gradients are evaluated at the given (measured) point.
    """
    v, theta = _check(spec, v, theta)
    var = _diag_variances(spec, sigma_direct)
    h, l = branch_gradients(spec, v, theta)
    return NoisePropagation(spec, var, h, l)


@dataclass(frozen=True)
class RegressionData:
    """All timestamps of a dataset in batched form.

    Shapes: ``X (T, 2n, 2m)``, ``y (T, 2n)``, ``h``/``l`` ``(T, m, 2, 4)``,
    ``var_direct (T, 4n)``.
    """

    spec: GridSpec
    X: np.ndarray
    y: np.ndarray
    h: np.ndarray
    l: np.ndarray
    var_direct: np.ndarray

    @property
    def T(self) -> int:
        return self.X.shape[0]

    @property
    def n_params(self) -> int:
        return 2 * self.spec.n_branch

    def sample(self, t: int) -> RegressionSample:
        return RegressionSample(self.X[t], self.y[t], t)

    def noise(self, t: int) -> NoisePropagation:
        return NoisePropagation(self.spec, self.var_direct[t], self.h[t], self.l[t])

    def subset(self, idx) -> "RegressionData":
        idx = np.asarray(idx)
        return RegressionData(self.spec, self.X[idx], self.y[idx], self.h[idx], self.l[idx],
                              self.var_direct[idx])

    @cached_property
    def _placement(self):
        """Sparse maps from per-branch gradient values to flattened ``(2n, 2n)`` blocks."""
        spec = self.spec
        n, m = spec.n_bus, spec.n_branch
        chan = _channel_index(spec)
        ends = np.stack([spec.from_idx, spec.to_idx], axis=1)
        rows = np.broadcast_to(ends[:, :, None], (m, 2, 4))
        cols = np.broadcast_to(chan[:, None, :], (m, 2, 4))
        src = np.arange(m * 8)
        shape = (m * 8, 4 * n * n)
        p_map = sparse.csr_matrix((np.ones(m * 8), (src, (rows * 2 * n + cols).ravel())), shape=shape)
        q_map = sparse.csr_matrix((np.ones(m * 8), (src, ((n + rows) * 2 * n + cols).ravel())), shape=shape)
        return p_map, q_map

    def residual_jacobian(self, beta) -> np.ndarray:
        """``d (X_t beta) / d phi`` for every timestamp, ``(T, 2n, 2n)``.

        This is the first-order map from voltage noise to the error of
        ``X_t beta``.
        """
        m, n = self.spec.n_branch, self.spec.n_bus
        g = np.asarray(beta)[:m, None, None]
        b = np.asarray(beta)[m:, None, None]
        vals_p = (g * self.h + b * self.l).reshape(self.T, -1)
        vals_q = (g * self.l - b * self.h).reshape(self.T, -1)
        p_map, q_map = self._placement
        A = (p_map.T @ vals_p.T).T + (q_map.T @ vals_q.T).T
        return np.asarray(A).reshape(self.T, 2 * n, 2 * n)

    def error_from_phi(self, delta) -> np.ndarray:
        """Regressor error ``eps_X`` induced by voltage errors ``delta`` (``(T, 2n)``)."""
        spec = self.spec
        d = np.asarray(delta)[:, _channel_index(spec)]           # (T, m, 4)
        dc = np.einsum("tjea,tja->tje", self.h, d)
        dd = np.einsum("tjea,tja->tje", self.l, d)
        out = np.zeros_like(self.X)
        n, m = spec.n_bus, spec.n_branch
        cols = np.arange(m)
        for e, rows in enumerate((spec.from_idx, spec.to_idx)):
            out[:, rows, cols] = dc[:, :, e]
            out[:, rows, m + cols] = dd[:, :, e]
            out[:, n + rows, cols] = dd[:, :, e]
            out[:, n + rows, m + cols] = -dc[:, :, e]
        return out

    def residual_covariance(self, beta, jacobian=None) -> np.ndarray:
        """Covariance of ``y_t - X_t beta`` under the linearized model, ``(T, 2n, 2n)``."""
        A = self.residual_jacobian(beta) if jacobian is None else jacobian
        n2 = 2 * self.spec.n_bus
        S = (A * self.var_direct[:, None, :n2]) @ np.swapaxes(A, 1, 2)
        idx = np.arange(n2)
        S[:, idx, idx] += self.var_direct[:, n2:]
        return S

    def row_variances(self) -> np.ndarray:
        """Scalar noise variance per equation row of ``[X_t | y_t]``, ``(T, 2n)``.

        Sum of the variances of the row's regressor entries plus the output
        variance; cross-entry correlations are ignored.
        """
        spec = self.spec
        n = spec.n_bus
        chan = _channel_index(spec)
        var_phi = self.var_direct[:, : 2 * n][:, chan]           # (T, m, 4)
        energy = (self.h**2 + self.l**2) * var_phi[:, :, None, :]
        per_end = energy.sum(axis=-1)                              # (T, m, 2)
        row = np.zeros((self.T, n))
        np.add.at(row, (slice(None), spec.from_idx), per_end[:, :, 0])
        np.add.at(row, (slice(None), spec.to_idx), per_end[:, :, 1])
        return np.concatenate([row, row], axis=1) + self.var_direct[:, 2 * n:]

    def x_gram(self) -> np.ndarray:
        """``J^T J`` of ``vec(X)`` w.r.t. ``phi`` per timestamp, ``(T, 2n, 2n)``.

        Each ``C``/``D`` entry appears twice in ``X``, hence the factor two.
        """
        spec = self.spec
        n = spec.n_bus
        chan = _channel_index(spec)
        outer = 2 * (np.einsum("tjea,tjeb->tjab", self.h, self.h)
                     + np.einsum("tjea,tjeb->tjab", self.l, self.l))
        G = np.zeros((self.T, 2 * n, 2 * n))
        for a in range(4):
            for b in range(4):
                np.add.at(G, (slice(None), chan[:, a], chan[:, b]), outer[:, :, a, b])
        return G


def direct_variances(ms: MeasurementSet, rel_std=None, abs_std=None) -> np.ndarray:
    """Diagonal direct covariance ``[v; theta; p; q]`` per bus, length ``4n``.

    Uses ``abs_std`` (``(4, n)``) when given, else ``rel_std`` times the
    empirical std of each measured channel.
    """
    from .powerflow import noise_scale

    if abs_std is None:
        if rel_std is None:
            raise ValueError("either rel_std or abs_std is required")
        abs_std = noise_scale(ms, rel_std)
    return (np.asarray(abs_std, dtype=float) ** 2).reshape(-1)


def prepare(spec: GridSpec, ms: MeasurementSet, var_direct, cov_mode: str = "per-timestamp") -> RegressionData:
    """Regressors, outputs and gradients for every timestamp of ``ms``.

    ``var_direct`` is a length-``4n`` diagonal (or diagonal matrix) shared by
    all timestamps, or a ``(T, 4n)`` array of per-timestamp diagonals. ``cov_mode="mean"`` replaces the per-timestamp
    gradients by their dataset mean.
    """
    if ms.n_bus != spec.n_bus:
        raise ValueError(f"measurements have {ms.n_bus} buses, grid has {spec.n_bus}")
    v, theta = _check(spec, ms.v, ms.theta)
    X = build_regressors(spec, v, theta)
    y = build_output(ms.p, ms.q)
    h, l = branch_gradients(spec, v, theta)
    if cov_mode == "mean":
        h = np.broadcast_to(h.mean(axis=0), h.shape).copy()
        l = np.broadcast_to(l.mean(axis=0), l.shape).copy()
    elif cov_mode != "per-timestamp":
        raise ValueError(f"unknown cov_mode {cov_mode!r}")
    var = np.asarray(var_direct, dtype=float)
    if var.ndim == 2 and var.shape == (ms.T, 4 * spec.n_bus):
        var = np.stack([_diag_variances(spec, row) for row in var])
    else:
        var = np.broadcast_to(_diag_variances(spec, var), (ms.T, 4 * spec.n_bus)).copy()
    return RegressionData(spec, X, y, h, l, var)
