import warnings

import numpy as np
import pytest

from mdlmgroup.design import DesignSpec, assemble_design, block_track
from mdlmgroup.distributions import cholesky
from mdlmgroup.errors import DimensionMismatch, ValidationError
from mdlmgroup.mdlm_filter import (ApproximationWarning, EvolutionSpec, PosteriorMoments,
                                   PriorSpec, filter_series, filter_step, filtered_means,
                                   normal_approx)
from oracles import static_conjugate_posterior


def test_scalar_step_by_hand():
    prev = PosteriorMoments(np.zeros((1, 1)), np.ones((1, 1)), np.ones((1, 1)), 1.0)
    post = filter_step(prev, np.array([1.0]), EvolutionSpec(1.0), np.array([2.0]))
    # q = 2, e = 2, A = 0.5
    assert post.m[0, 0] == 1.0
    assert post.c[0, 0] == 0.5
    assert post.n == 2.0
    assert post.s[0, 0] == 1.5


def test_zero_forecast_error_keeps_mean_and_shrinks_scale(rng):
    p, q = 2, 3
    prev = PosteriorMoments(rng.standard_normal((p, q)), np.eye(p), 2.0 * np.eye(q), 4.0)
    f = np.array([1.0, 0.5])
    y = f @ prev.m  # G = I, so the forecast is f'm
    post = filter_step(prev, f, EvolutionSpec(0.9), y)
    np.testing.assert_allclose(post.m, prev.m, atol=1e-14)
    np.testing.assert_allclose(post.s, 4.0 * prev.s / 5.0, atol=1e-14)


def test_step_dimension_check():
    prev = PosteriorMoments(np.zeros((2, 1)), np.eye(2), np.eye(1), 1.0)
    with pytest.raises(DimensionMismatch):
        filter_step(prev, np.ones(3), EvolutionSpec(1.0), np.ones(1))


@pytest.mark.parametrize("n_scans", [1, 50])
def test_static_model_matches_batch_posterior(rng, n_scans):
    p, q = 2, 3
    f = np.column_stack([np.ones(n_scans), rng.standard_normal(n_scans)])
    y = f @ rng.standard_normal((p, q)) + rng.standard_normal((n_scans, q))
    prior = PriorSpec(m0=0.3, c0_scale=10.0, s0=1.5, n0=2.0)
    out = filter_series(y, f, EvolutionSpec(1.0), prior)
    init = prior.initial(p, q)
    m, c, s, n = static_conjugate_posterior(y, f, init.m, init.c, init.s, init.n)
    fin = out.final
    assert np.max(np.abs(fin.m - m)) < 1e-8
    assert np.max(np.abs(fin.c - c)) < 1e-8
    assert np.max(np.abs(fin.s - s)) < 1e-8
    assert fin.n == n


def test_constant_series_converges_to_sample_mean():
    y = np.full((200, 1), 3.7)
    out = filter_series(y, np.ones((200, 1)), EvolutionSpec(1.0), PriorSpec())
    running = np.cumsum(y[:, 0]) / np.arange(1, 201)
    assert abs(out.final.m[0, 0] - running[-1]) < 1e-3
    errs = np.abs(out.posterior.m[1:, 0, 0] - 3.7)
    assert np.all(np.diff(errs) <= 1e-15)


def test_empty_series_returns_prior():
    prior = PriorSpec(m0=1.0, c0_scale=5.0)
    out = filter_series(np.zeros((0, 2)), np.zeros((0, 3)), EvolutionSpec(), prior)
    assert len(out) == 0 and out.e.shape == (0, 2)
    init = prior.initial(3, 2)
    np.testing.assert_array_equal(out.final.m, init.m)
    np.testing.assert_array_equal(out.final.c, init.c)
    assert out.final.n == init.n


def test_active_voxel_has_positive_stimulus_mean(rng):
    design = assemble_design(DesignSpec([block_track("s", 20, 20, 200)], 2.0, 100))
    x = design.columns[:, 1]
    y = (5.0 + 1.0 * x + rng.standard_normal(100))[:, None]
    out = filter_series(y, design, EvolutionSpec(0.98), PriorSpec())
    assert out.final.m[1, 0] > 0


def test_covariances_stay_positive_definite_and_dof_counts(rng):
    design = assemble_design(DesignSpec([block_track("s", 20, 20, 200)], 2.0, 100))
    y = rng.standard_normal((100, 4))
    out = filter_series(y, design, EvolutionSpec(0.9), PriorSpec(n0=3.0))
    cholesky(out.posterior.c)
    cholesky(out.posterior.s)
    assert out.final.n == 3.0 + 100


def test_scale_equivariance(rng):
    design = assemble_design(DesignSpec([block_track("s", 20, 20, 120)], 2.0, 60))
    y = rng.standard_normal((60, 3))
    prior = PriorSpec(m0=0.0, s0=1e-12)
    a = filter_series(y, design, EvolutionSpec(0.95), prior).final
    b = filter_series(3.0 * y, design, EvolutionSpec(0.95), PriorSpec(m0=0.0, s0=9e-12)).final
    np.testing.assert_allclose(b.s, 9.0 * a.s, rtol=1e-10)
    np.testing.assert_allclose(b.c, a.c, rtol=1e-10)
    np.testing.assert_allclose(b.m, 3.0 * a.m, rtol=1e-10, atol=1e-12)


def test_batched_filter_matches_single(rng):
    design = assemble_design(DesignSpec([block_track("s", 10, 10, 80)], 2.0, 40))
    ys = rng.standard_normal((3, 40, 2))
    outs = filter_series(ys, design, EvolutionSpec(0.95), PriorSpec())
    for y, out in zip(ys, outs):
        ref = filter_series(y, design, EvolutionSpec(0.95), PriorSpec())
        np.testing.assert_array_equal(out.posterior.m, ref.posterior.m)
        np.testing.assert_array_equal(out.posterior.s, ref.posterior.s)


def test_step_fold_matches_series(rng):
    design = assemble_design(DesignSpec([block_track("s", 10, 10, 40)], 2.0, 20))
    y = rng.standard_normal((20, 2))
    evo, prior = EvolutionSpec(0.9), PriorSpec()
    state = prior.initial(2, 2)
    for t in range(20):
        state = filter_step(state, design.columns[t], evo, y[t])
    fin = filter_series(y, design, evo, prior).final
    np.testing.assert_allclose(state.m, fin.m, atol=1e-12)
    np.testing.assert_allclose(state.s, fin.s, atol=1e-12)


def test_filtered_means_match_full_filter(rng):
    design = assemble_design(DesignSpec([block_track("s", 10, 10, 60)], 2.0, 30))
    y = rng.standard_normal((5, 30, 3))
    prior = PriorSpec(m0=0.2)
    init = prior.initial(2, 3)
    means = filtered_means(y, design, EvolutionSpec(0.95), init.m, init.c)
    for b in range(5):
        ref = filter_series(y[b], design, EvolutionSpec(0.95), prior).posterior.m[1:]
        np.testing.assert_allclose(means[b], ref, atol=1e-12)


def test_series_length_mismatch():
    with pytest.raises(DimensionMismatch):
        filter_series(np.zeros((5, 1)), np.ones((6, 1)), EvolutionSpec(), PriorSpec())


def test_normal_approx_threshold():
    ident = PosteriorMoments(np.eye(2), np.eye(2), np.eye(2), 45.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        params = normal_approx(ident)
    assert not params.degraded
    np.testing.assert_array_equal(params.mean, np.eye(2))
    np.testing.assert_array_equal(params.row_cov, np.eye(2))
    with pytest.warns(ApproximationWarning):
        low = normal_approx(PosteriorMoments(np.eye(2), np.eye(2), np.eye(2), 10.0))
    assert low.degraded


def test_spec_validation():
    with pytest.raises(ValidationError):
        EvolutionSpec(0.0)
    with pytest.raises(ValidationError):
        EvolutionSpec(1.5)
    with pytest.raises(ValidationError):
        PriorSpec(c0_scale=0.0)
    with pytest.warns(UserWarning):
        EvolutionSpec(0.5)
    evo = EvolutionSpec(0.9)
    assert EvolutionSpec.from_json(evo.to_json()) == evo
    assert PriorSpec.from_json(PriorSpec().to_json()) == PriorSpec()
