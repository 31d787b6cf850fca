import numpy as np
import pytest
from scipy import stats

from conftest import random_spd
from mdlmgroup.distributions import (MatrixNormalParams, cholesky, inverse_wishart_factor,
                                     sample_inverse_wishart, sample_matrix_normal, sample_mvn)
from mdlmgroup.errors import DimensionMismatch, DofTooSmall, NotPositiveDefinite, ValidationError


def test_cholesky_identity():
    np.testing.assert_array_equal(cholesky(np.eye(3)), np.eye(3))


def test_cholesky_known_factor():
    a = np.array([[4.0, 2.0], [2.0, 3.0]])
    low = cholesky(a)
    np.testing.assert_allclose(low, [[2.0, 0.0], [1.0, np.sqrt(2.0)]], atol=1e-15)
    np.testing.assert_allclose(low @ low.T, a, atol=1e-14)


def test_cholesky_indefinite_raises():
    with pytest.raises(NotPositiveDefinite):
        cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_cholesky_rejects_asymmetric_and_non_square():
    with pytest.raises(ValidationError):
        cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(DimensionMismatch):
        cholesky(np.ones((2, 3)))


def test_cholesky_jitter_rescues_singular_psd():
    a = np.ones((3, 3))  # rank one, PSD
    low = cholesky(a)
    np.testing.assert_allclose(low @ low.T, a, atol=1e-8)


def test_cholesky_zero_matrix_factors_to_zero():
    low = cholesky(np.zeros((2, 2)))
    np.testing.assert_allclose(low, 0.0, atol=1e-149)


def test_cholesky_stack_matches_loop(rng):
    stack = np.stack([random_spd(rng, 4) for _ in range(5)])
    np.testing.assert_allclose(cholesky(stack), [np.linalg.cholesky(a) for a in stack])


def test_matrix_normal_degenerate_row_cov_returns_mean(rng):
    mean = rng.standard_normal((2, 3))
    params = MatrixNormalParams(mean, 1e-30 * np.eye(2), np.eye(3))
    np.testing.assert_allclose(sample_matrix_normal(params, rng), mean, atol=1e-12)


def test_matrix_normal_vec_covariance_is_kronecker(rng):
    row = np.array([[1.0, 0.3], [0.3, 0.5]])
    col = np.array([[2.0, -0.4], [-0.4, 1.0]])
    n = 100_000
    x = sample_matrix_normal(MatrixNormalParams(np.zeros((2, 2)), row, col), rng, size=n)
    vec = np.swapaxes(x, -1, -2).reshape(n, 4)  # column stacking
    emp = vec.T @ vec / n
    expected = np.kron(col, row)
    # SE of a second moment E[ab] is sqrt((E[a^2]E[b^2] + E[ab]^2)/n)
    d = np.sqrt(np.diag(expected))
    se = np.sqrt((np.outer(d**2, d**2) + expected**2) / n)
    assert np.all(np.abs(emp - expected) < 4 * se)


def test_matrix_normal_identity_cov_is_iid(rng):
    n = 100_000
    x = sample_matrix_normal(MatrixNormalParams(np.zeros((2, 2)), np.eye(2), np.eye(2)), rng,
                             size=n)
    vec = x.reshape(n, 4)
    emp = vec.T @ vec / n
    se = np.sqrt((1 + np.eye(4)) / n)
    assert np.all(np.abs(emp - np.eye(4)) < 4 * se)


def test_matrix_normal_seeded_is_reproducible():
    params = MatrixNormalParams(np.zeros((2, 3)), np.eye(2), np.eye(3))
    a = sample_matrix_normal(params, np.random.default_rng(42))
    b = sample_matrix_normal(params, np.random.default_rng(42))
    assert a.tobytes() == b.tobytes()


def test_matrix_normal_params_shape_check():
    with pytest.raises(DimensionMismatch):
        MatrixNormalParams(np.zeros((2, 3)), np.eye(3), np.eye(3))


def test_mvn_degenerate_and_moments(rng):
    mu = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(sample_mvn(mu, 1e-30 * np.eye(3), rng), mu, atol=1e-12)
    draws = sample_mvn(np.zeros(3), np.eye(3), rng, size=100_000)
    assert np.all(np.abs(draws.mean(axis=0)) < 4 / np.sqrt(100_000))


def test_mvn_dimension_mismatch(rng):
    with pytest.raises(DimensionMismatch):
        sample_mvn(np.zeros(2), np.eye(3), rng)


def test_inverse_wishart_scalar_is_inverse_gamma(rng):
    draws = sample_inverse_wishart(10.0, np.array([[10.0]]), rng, size=100_000)[:, 0, 0]
    # IW(dof, scale) with q = 1 is inverse-gamma(dof/2, dof*scale/2), mean 12.5 here
    ig = stats.invgamma(a=5.0, scale=50.0)
    assert ig.mean() == pytest.approx(12.5)
    se = ig.std() / np.sqrt(draws.size)
    assert abs(draws.mean() - 12.5) < 4 * se


def test_inverse_wishart_mean_matches_convention(rng):
    scale = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, 0.2], [0.0, 0.2, 1.5]])
    dof = 12.0
    draws = sample_inverse_wishart(dof, scale, rng, size=50_000)
    oracle = stats.invwishart(df=dof, scale=dof * scale)
    np.testing.assert_allclose(oracle.mean(), scale * dof / (dof - 3 - 1))
    ref = oracle.rvs(size=50_000, random_state=np.random.default_rng(1))
    se = np.sqrt(draws.var(axis=0) / draws.shape[0] + ref.var(axis=0) / ref.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - ref.mean(axis=0)) < 4 * se)
    assert np.all(np.abs(draws.mean(axis=0) - oracle.mean()) < 4 * np.sqrt(draws.var(axis=0)
                                                                            / draws.shape[0]))


def test_inverse_wishart_factor_gives_spd(rng):
    y = inverse_wishart_factor(8.0, random_spd(rng, 3), rng, size=20)
    sigma = y @ np.swapaxes(y, -1, -2)
    assert np.all(np.linalg.eigvalsh(sigma) > 0)


def test_inverse_wishart_seeded_and_dof_boundary():
    a = sample_inverse_wishart(5.0, np.eye(2), np.random.default_rng(3))
    b = sample_inverse_wishart(5.0, np.eye(2), np.random.default_rng(3))
    assert a.tobytes() == b.tobytes()
    with pytest.raises(DofTooSmall):
        sample_inverse_wishart(2.0, np.eye(3), np.random.default_rng(0))
