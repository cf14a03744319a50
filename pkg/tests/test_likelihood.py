import numpy as np
import pytest

from gridem.likelihood import (DenseNoise, ProjectionError, batch_log_density, conditional_log_density,
                               log_density, log_normalizers, project_truth, quad_residuals, solve_psd)
from gridem.pipeline import regression_data, simulate


@pytest.fixture(scope="module")
def small(scenario):
    ms = simulate(scenario, T=40, noise=0.01, seed=3)
    return ms, regression_data(scenario.grid, ms)


def _dense(prop):
    return DenseNoise(prop.sigma_x, prop.sigma_y)


def test_projection_meets_constraint(small):
    ms, data = small
    for t in (0, 7, 23):
        s = data.sample(t)
        p = ms.truth_params[ms.truth_labels[t]]
        for noise in (data.noise(t), _dense(data.noise(t))):
            res = project_truth(s.X, s.y, p.g, p.b, noise)
            scale = np.abs(s.y).max()
            assert np.max(np.abs(res.y_star - res.X_star @ p.beta)) < 1e-9 * scale


def test_structured_and_dense_agree(small):
    ms, data = small
    s = data.sample(5)
    p = ms.truth_params[0]
    a = project_truth(s.X, s.y, p.g, p.b, data.noise(5))
    b = project_truth(s.X, s.y, p.g, p.b, _dense(data.noise(5)))
    np.testing.assert_allclose(a.X_star, b.X_star, atol=1e-12)
    np.testing.assert_allclose(a.y_star, b.y_star, atol=1e-12)
    assert a.quad_residual == pytest.approx(b.quad_residual, rel=1e-8)
    assert a.log_density == pytest.approx(b.log_density, rel=1e-9)


def test_batched_density_matches_single_sample(small):
    ms, data = small
    p = ms.truth_params[1]
    batch = batch_log_density(data, p.beta)
    for t in (0, 11, 39):
        s = data.sample(t)
        single = conditional_log_density(s.X, s.y, p.g, p.b, data.noise(t))
        assert batch[t] == pytest.approx(single, rel=1e-8)


def test_covariance_scaling_identity(small):
    ms, data = small
    t = 9
    s = data.sample(t)
    p = ms.truth_params[ms.truth_labels[t]]
    prop = data.noise(t)
    base = project_truth(s.X, s.y, p.g, p.b, _dense(prop))
    c = 4.0
    scaled = project_truth(s.X, s.y, p.g, p.b, DenseNoise(c * prop.sigma_x, c * prop.sigma_y))
    rank = (np.linalg.matrix_rank(prop.sigma_x, tol=1e-12 * np.trace(prop.sigma_x) / prop.sigma_x.shape[0])
            + np.count_nonzero(np.diag(prop.sigma_y) > 0))
    assert scaled.quad_residual == pytest.approx(base.quad_residual / c, rel=1e-8)
    expected = base.log_density + 0.5 * base.quad_residual * (1 - 1 / c) - 0.5 * rank * np.log(c)
    assert scaled.log_density == pytest.approx(expected, rel=1e-8)
    np.testing.assert_allclose(scaled.X_star, base.X_star, atol=1e-12)


def test_true_parameters_beat_perturbed_ones(small, rng):
    ms, data = small
    idx = np.flatnonzero(ms.truth_labels == 0)
    sub = data.subset(idx)
    beta = ms.truth_params[0].beta
    true_ll = batch_log_density(sub, beta).mean()
    for _ in range(5):
        wrong = beta * (1 + 0.1 * rng.standard_normal(beta.size))
        assert batch_log_density(sub, wrong).mean() < true_ll


def test_zero_covariance_semantics():
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    beta = np.array([2.0, 3.0])
    zero = DenseNoise(np.zeros((4, 4)), np.zeros((2, 2)))
    assert conditional_log_density(X, X @ beta, beta[:1], beta[1:], zero) == 0.0
    assert conditional_log_density(X, X @ beta + 0.1, beta[:1], beta[1:], zero) == -np.inf
    with pytest.raises(ProjectionError):
        project_truth(X, X @ beta + 0.1, beta[:1], beta[1:], zero)
    # an error placed only in a zero-variance direction is impossible
    noise = DenseNoise(np.zeros((4, 4)), np.diag([1.0, 0.0]))
    assert log_density(X, [0.0, 0.0], X, [0.5, 0.0], noise) > -np.inf
    assert log_density(X, [0.0, 0.0], X, [0.0, 0.5], noise) == -np.inf


def test_inputs_are_not_modified(small):
    ms, data = small
    s = data.sample(2)
    X0, y0 = s.X.copy(), s.y.copy()
    p = ms.truth_params[0]
    project_truth(s.X, s.y, p.g, p.b, data.noise(2))
    batch_log_density(data, p.beta)
    np.testing.assert_array_equal(s.X, X0)
    np.testing.assert_array_equal(s.y, y0)


def test_shape_mismatch_rejected(small):
    ms, data = small
    s = data.sample(0)
    with pytest.raises(ValueError):
        project_truth(s.X[:, :-1], s.y, ms.truth_params[0].g, ms.truth_params[0].b, data.noise(0))


def test_normalizers_do_not_depend_on_parameters(small):
    ms, data = small
    norm = log_normalizers(data)
    for p in ms.truth_params[:2]:
        np.testing.assert_allclose(batch_log_density(data, p.beta) + 0.5 * quad_residuals(data, p.beta), norm,
                                   rtol=1e-10)


def test_solve_psd_regular_and_singular(rng):
    M = rng.standard_normal((3, 4, 4))
    S = M @ np.swapaxes(M, 1, 2) + 0.1 * np.eye(4)
    B = rng.standard_normal((3, 4))
    out, outside = solve_psd(S, B)
    np.testing.assert_allclose(np.einsum("tij,tj->ti", S, out), B, atol=1e-10)
    assert not outside.any()
    # rank-2 covariances: right-hand sides inside the range solve, others are flagged
    U = rng.standard_normal((3, 4, 2))
    S = U @ np.swapaxes(U, 1, 2)
    inside = np.einsum("tij,tj->ti", U, rng.standard_normal((3, 2)))
    out, outside = solve_psd(S, inside)
    np.testing.assert_allclose(np.einsum("tij,tj->ti", S, out), inside, atol=1e-9)
    assert not outside.any()
    bad = inside.copy()
    bad[1] += np.linalg.svd(U[1])[0][:, -1]
    _, outside = solve_psd(S, bad)
    assert outside.tolist() == [False, True, False]


def test_log_density_gaussian_examples():
    X = np.zeros((1, 1))
    ident = DenseNoise(np.eye(1), np.eye(1))
    assert log_density(X, [0.0], X, [0.0], ident) == pytest.approx(-np.log(2 * np.pi))   # d = 2
    only_y = DenseNoise(np.zeros((1, 1)), np.eye(1))
    assert log_density(X, [1.0], X, [0.0], only_y) == pytest.approx(-0.5 - 0.5 * np.log(2 * np.pi))
    # independent blocks add up
    both = log_density(X + 0.3, [0.7], X, [0.0], DenseNoise(np.array([[2.0]]), np.array([[0.5]])))
    part_x = -0.5 * 0.09 / 2.0 - 0.5 * np.log(2 * np.pi * 2.0)
    part_y = -0.5 * 0.49 / 0.5 - 0.5 * np.log(2 * np.pi * 0.5)
    assert both == pytest.approx(part_x + part_y)


def test_projection_is_optimal_on_the_constraint(small, rng):
    ms, data = small
    t = 4
    s = data.sample(t)
    p = ms.truth_params[ms.truth_labels[t]]
    prop = data.noise(t)
    noise = _dense(prop)
    best = project_truth(s.X, s.y, p.g, p.b, noise)
    # feasible perturbations: move X* inside the support of Sigma_X and set y' = X' beta
    U = prop.jacobian_x * np.sqrt(prop.var_phi)
    for _ in range(100):
        dX = (U @ rng.standard_normal(U.shape[1])).reshape(s.X.shape, order="F")
        X2 = best.X_star + rng.uniform(0.01, 1.0) * dX
        y2 = X2 @ p.beta
        assert log_density(s.X, s.y, X2, y2, noise) <= best.log_density + 1e-9 * abs(best.log_density)
