"""Conditional density of a sample given line parameters.

The true regressors and outputs are estimated by the maximum-likelihood
projection of the measurement onto ``y_hat = X_hat beta``. With Lagrange
multiplier ``lam`` the KKT conditions reduce to

    S lam = r,   r = y - X beta,   S = Sigma_y + B Sigma_X B^T,  B = beta^T (x) I

with ``eps_y = Sigma_y lam`` and ``vec(eps_X) = -Sigma_X B^T lam``; the
minimal Mahalanobis distance is ``r^T lam``. Covariances are positive
semidefinite in general; eigenvalues below ``1e-12 * trace / dim`` count as
zero-variance directions, in which any residual makes the sample impossible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .eiv import NoisePropagation, RegressionData

EIG_FLOOR = 1e-12
LOG2PI = np.log(2 * np.pi)


class ProjectionError(ArithmeticError):
    """The constraint cannot be met within the covariance support."""


@dataclass(frozen=True)
class DenseNoise:
    """Explicit covariances of ``vec(eps_X)`` (column-major) and ``eps_y``."""

    sigma_x: np.ndarray
    sigma_y: np.ndarray


@dataclass(frozen=True)
class ProjectionResult:
    X_star: np.ndarray
    y_star: np.ndarray
    log_density: float
    quad_residual: float


def _tol(*arrays) -> float:
    return 1e-9 * max([1.0] + [float(np.max(np.abs(a), initial=0.0)) for a in arrays])


def _eig_support(S):
    """Eigenpairs of a PSD matrix with the mask of non-negligible eigenvalues."""
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if S.shape[0] and w[0] < -1e-9 * max(1.0, abs(w[-1])):
        raise ValueError("covariance is not positive semidefinite")
    floor = EIG_FLOOR * max(np.trace(S), 0.0) / max(S.shape[0], 1)
    return w, V, w > floor


def _pinv_apply(S, r, tol):
    """``S^+ r`` and whether ``r`` lies in the support of ``S`` (within ``tol``)."""
    w, V, keep = _eig_support(S)
    z = V.T @ r
    inside = bool(np.all(np.abs(z[~keep]) <= tol))
    out = V[:, keep] @ (z[keep] / w[keep])
    return out, inside


def _plogdet(S) -> float:
    w, _, keep = _eig_support(S)
    return float(np.sum(np.log(w[keep])))


def _beta(g, b):
    return np.concatenate([np.asarray(g, dtype=float).ravel(), np.asarray(b, dtype=float).ravel()])


def _project_dense(X, y, beta, noise):
    r = y - X @ beta
    B = np.kron(beta[None, :], np.eye(X.shape[0]))
    SxBt = noise.sigma_x @ B.T
    S = noise.sigma_y + B @ SxBt
    lam, inside = _pinv_apply(S, r, _tol(X, y))
    if not inside:
        raise ProjectionError("residual lies outside the covariance support; KKT system is singular")
    eps_y = noise.sigma_y @ lam
    eps_x = -(SxBt @ lam).reshape(X.shape, order="F")
    return X - eps_x, y - eps_y, float(r @ lam)


def _single(noise: NoisePropagation, X, y) -> RegressionData:
    return RegressionData(noise.spec, X[None], y[None], noise.h[None], noise.l[None], noise.var_direct[None])


def _project_structured(X, y, beta, noise: NoisePropagation):
    data = _single(noise, X, y)
    n2 = 2 * noise.spec.n_bus
    r = y - X @ beta
    A = data.residual_jacobian(beta)[0]
    S = data.residual_covariance(beta)[0]
    lam, inside = _pinv_apply(S, r, _tol(X, y))
    if not inside:
        raise ProjectionError("residual lies outside the covariance support; KKT system is singular")
    eps_y = noise.var_direct[n2:] * lam
    delta = -noise.var_phi * (A.T @ lam)
    eps_x = data.error_from_phi(delta[None])[0]
    return X - eps_x, y - eps_y, float(r @ lam)


def project_truth(X, y, g, b, noise) -> ProjectionResult:
    """Maximum-likelihood ``(X*, y*)`` on the constraint ``y* = X* [g; b]``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    beta = _beta(g, b)
    if X.shape != (y.size, beta.size):
        raise ValueError(f"X has shape {X.shape}, expected {(y.size, beta.size)}")
    if isinstance(noise, NoisePropagation):
        X_star, y_star, quad = _project_structured(X, y, beta, noise)
    else:
        X_star, y_star, quad = _project_dense(X, y, beta, noise)
    ld = log_density(X, y, X_star, y_star, noise)
    return ProjectionResult(X_star, y_star, ld, quad)


def _normalizers(noise) -> float:
    if isinstance(noise, NoisePropagation):
        keep = noise.var_phi > 0
        F = noise.jacobian_x[:, keep] * np.sqrt(noise.var_phi[keep])
        gram = F.T @ F
        # nonzero spectrum of Sigma_X = F F^T equals that of F^T F
        w, _, _ = _eig_support(gram)
        dim = noise.jacobian_x.shape[0]
        floor = EIG_FLOOR * max(np.trace(gram), 0.0) / dim
        w = w[w > floor]
        ld_x = np.sum(np.log(w))
        rank_x = w.size
        sy = noise.var_y
    else:
        ld_x = _plogdet(noise.sigma_x)
        rank_x = int(np.sum(_eig_support(noise.sigma_x)[2]))
        sy = None
    if sy is not None:
        floor = EIG_FLOOR * sy.sum() / max(sy.size, 1)
        sy = sy[sy > floor]
        ld_y, rank_y = np.sum(np.log(sy)), sy.size
    else:
        ld_y = _plogdet(noise.sigma_y)
        rank_y = int(np.sum(_eig_support(noise.sigma_y)[2]))
    return -0.5 * (ld_x + ld_y + (rank_x + rank_y) * LOG2PI)


def _quad_x(ex, noise, tol) -> float:
    if isinstance(noise, NoisePropagation):
        keep = noise.var_phi > 0
        F = noise.jacobian_x[:, keep] * np.sqrt(noise.var_phi[keep])
        if F.shape[1] == 0:
            return 0.0 if np.all(np.abs(ex) <= tol) else np.inf
        u, *_ = np.linalg.lstsq(F, ex, rcond=None)
        gram = F.T @ F
        w, V, support = _eig_support(gram)
        # restrict to directions with non-negligible variance
        u = V[:, support] @ (V[:, support].T @ u)
        if np.max(np.abs(F @ u - ex), initial=0.0) > tol:
            return np.inf
        return float(u @ u)
    z, inside = _pinv_apply(noise.sigma_x, ex, tol)
    return float(ex @ z) if inside else np.inf


def log_density(X, y, X_star, y_star, noise) -> float:
    """Gaussian log-density of the measurement given candidate true values.

    Returns ``-inf`` when a residual falls in a zero-variance direction.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    ex = (X - np.asarray(X_star)).ravel(order="F")
    ey = y - np.asarray(y_star)
    tol = _tol(X, y)
    qx = _quad_x(ex, noise, tol)
    sy = noise.sigma_y if not isinstance(noise, NoisePropagation) else np.diag(noise.var_y)
    z, inside = _pinv_apply(sy, ey, tol)
    qy = float(ey @ z) if inside else np.inf
    if not np.isfinite(qx + qy):
        return -np.inf
    return -0.5 * (qx + qy) + _normalizers(noise)


def conditional_log_density(X, y, g, b, noise) -> float:
    """``log P(X, y | g, b)`` through the projected true values."""
    try:
        res = project_truth(X, y, g, b, noise)
    except ProjectionError:
        return -np.inf
    return res.log_density


# batched evaluation used by the EM engine


def solve_psd(S, B):
    """Batched ``S_t^+ B_t`` for PSD ``S`` ``(T, d, d)`` and ``B`` ``(T, d, ...)``.

    Also returns a mask of timestamps whose right-hand side leaves the
    support of ``S`` (only possible when ``S`` is singular).
    """
    vec = B.ndim == 2
    Bm = B[..., None] if vec else B
    try:
        L = np.linalg.cholesky(S)
        floor = EIG_FLOOR * np.trace(S, axis1=1, axis2=2) / S.shape[-1]
        diag = np.diagonal(L, axis1=1, axis2=2)
        if np.all(diag**2 > floor[:, None]):
            out = np.linalg.solve(S, Bm)
            return (out[..., 0] if vec else out), np.zeros(S.shape[0], dtype=bool)
    except np.linalg.LinAlgError:
        pass
    w, V = np.linalg.eigh(S)
    floor = EIG_FLOOR * np.trace(S, axis1=1, axis2=2) / S.shape[-1]
    keep = w > floor[:, None]
    inv = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    z = np.swapaxes(V, 1, 2) @ Bm
    scale = 1e-9 * np.maximum(1.0, np.max(np.abs(Bm), axis=(1, 2)))
    outside = np.any((~keep)[:, :, None] & (np.abs(z) > scale[:, None, None]), axis=(1, 2))
    out = V @ (inv[:, :, None] * z)
    return (out[..., 0] if vec else out), outside


def quad_residuals(data: RegressionData, beta, return_multipliers: bool = False):
    """Projection distance ``r_t^T S_t^+ r_t`` for every timestamp, ``(T,)``.

    Entries are ``inf`` where the residual leaves the covariance support.
    With ``return_multipliers`` the KKT multipliers ``lam_t = S_t^+ r_t``,
    the covariances and the residual Jacobians are returned as well.
    """
    beta = np.asarray(beta, dtype=float)
    r = data.y - data.X @ beta
    A = data.residual_jacobian(beta)
    S = data.residual_covariance(beta, A)
    lam, outside = solve_psd(S, r)
    quad = np.einsum("ti,ti->t", r, lam)
    quad[outside] = np.inf
    if return_multipliers:
        return quad, lam, S, A
    return quad


def log_normalizers(data: RegressionData) -> np.ndarray:
    """Per-timestamp log normalization ``-1/2 log pdet(2 pi Sigma_X) - 1/2 log pdet(2 pi Sigma_y)``.

    These depend only on the covariances, not on the line parameters.
    """
    n2 = 2 * data.spec.n_bus
    var_phi = data.var_direct[:, :n2]
    var_y = data.var_direct[:, n2:]
    sd = np.sqrt(var_phi)
    gram = sd[:, :, None] * data.x_gram() * sd[:, None, :]
    w = np.linalg.eigvalsh(gram)
    dim = 2 * n2 * data.spec.n_branch
    floor_x = EIG_FLOOR * np.trace(gram, axis1=1, axis2=2) / dim
    keep_x = w > floor_x[:, None]
    floor_y = EIG_FLOOR * var_y.sum(axis=1) / n2
    keep_y = var_y > floor_y[:, None]
    ld = (np.sum(np.where(keep_x, np.log(np.where(keep_x, w, 1.0)), 0.0), axis=1)
          + np.sum(np.where(keep_y, np.log(np.where(keep_y, var_y, 1.0)), 0.0), axis=1))
    rank = keep_x.sum(axis=1) + keep_y.sum(axis=1)
    return -0.5 * (ld + rank * LOG2PI)


def batch_log_density(data: RegressionData, beta, normalizers=None) -> np.ndarray:
    """``log P(X_t, y_t | beta)`` for all timestamps."""
    if normalizers is None:
        normalizers = log_normalizers(data)
    return -0.5 * quad_residuals(data, beta) + normalizers
