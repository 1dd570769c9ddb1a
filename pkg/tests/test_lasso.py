import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dmla.errors import DataValidationError, DegenerateGridError
from dmla.lasso import (
    DesignSpec,
    build_lambda_grid,
    fit_lasso,
    fit_path,
    kkt_violation,
    lambda_max,
    objective,
    select_lambda_cv,
    soft_threshold,
)


def _ols(y, u, x):
    a = np.column_stack([np.ones(len(y)), u, x])
    return np.linalg.solve(a.T @ a, a.T @ y)


@pytest.mark.parametrize("z,gamma,expected", [(3, 1, 2), (-3, 1, -2), (0.5, 1, 0), (1, 1, 0)])
def test_soft_threshold_examples(z, gamma, expected):
    assert soft_threshold(z, gamma) == expected


@given(st.floats(-1e6, 1e6), st.floats(0, 1e6))
def test_soft_threshold_shrinks_toward_zero(z, gamma):
    out = soft_threshold(z, gamma)
    assert abs(out) <= abs(z)
    assert out == 0 or np.sign(out) == np.sign(z)


def test_soft_threshold_rejects_negative_gamma():
    with pytest.raises(ValueError):
        soft_threshold(1.0, -0.1)


def test_zero_penalty_is_least_squares():
    rng = np.random.default_rng(5)
    u = rng.standard_normal((60, 2))
    x = rng.standard_normal((60, 6)) * rng.uniform(0.5, 3, size=6) + 2.0
    y = 1.5 + u @ [0.3, -1] + x @ rng.standard_normal(6) + 0.1 * rng.standard_normal(60)
    fit = fit_lasso(DesignSpec(y, u, x), 0.0, tol=1e-12)
    coefs = np.concatenate([[fit.intercept], fit.unpenalized_coefs, fit.penalized_coefs])
    np.testing.assert_allclose(coefs, _ols(y, u, x), atol=1e-8)
    assert fit.converged


def test_above_lambda_max_gives_ols_on_unpenalized():
    rng = np.random.default_rng(2)
    u = rng.standard_normal((40, 1))
    x = rng.standard_normal((40, 5))
    y = u[:, 0] + x[:, 0] + rng.standard_normal(40)
    spec = DesignSpec(y, u, x)
    lmax = lambda_max(spec)
    fit = fit_lasso(spec, lmax * 1.0001)
    assert np.all(fit.penalized_coefs == 0)
    a = np.column_stack([np.ones(40), u])
    ref = np.linalg.lstsq(a, y, rcond=None)[0]
    np.testing.assert_allclose([fit.intercept, *fit.unpenalized_coefs], ref, atol=1e-10)
    below = fit_lasso(spec, lmax * 0.99)
    assert np.any(below.penalized_coefs != 0)


def test_lambda_max_scales_with_response():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((30, 4))
    y = x[:, 1] + rng.standard_normal(30)
    assert lambda_max(DesignSpec(2 * y, np.empty((30, 0)), x)) == pytest.approx(
        2 * lambda_max(DesignSpec(y, np.empty((30, 0)), x)), rel=1e-12
    )


def test_lambda_max_zero_for_orthogonal_response():
    x = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    y = np.array([1.0, 1.0, -1.0, -1.0])
    assert lambda_max(DesignSpec(y, np.empty((4, 0)), x)) == pytest.approx(0.0, abs=1e-15)


def test_single_column_lambda_max_bisection():
    # Penalized column equal to the centered response, unit scale.
    rng = np.random.default_rng(9)
    y = rng.standard_normal(50)
    x = ((y - y.mean()) / y.std()).reshape(-1, 1)
    spec = DesignSpec(y, np.empty((50, 0)), x)
    lmax = lambda_max(spec)
    assert lmax == pytest.approx(y.std(), rel=1e-12)
    assert fit_lasso(spec, lmax * (1 + 1e-9)).penalized_coefs[0] == 0
    assert fit_lasso(spec, lmax * (1 - 1e-6)).penalized_coefs[0] != 0


def test_lambda_grid_examples():
    np.testing.assert_allclose(build_lambda_grid(1.0, 3, 0.01), [1.0, 0.1, 0.01], rtol=1e-12)
    np.testing.assert_allclose(build_lambda_grid(2.0, 2, 0.5), [2.0, 1.0], rtol=1e-12)


@given(st.floats(1e-6, 1e6), st.integers(2, 50), st.floats(1e-4, 0.9))
def test_lambda_grid_decreasing_from_lmax(lmax, size, ratio):
    grid = build_lambda_grid(lmax, size, ratio)
    assert grid[0] == lmax
    assert np.all(np.diff(grid) < 0)
    assert grid[-1] == pytest.approx(lmax * ratio, rel=1e-9)


def test_lambda_grid_degenerate():
    with pytest.raises(DegenerateGridError):
        build_lambda_grid(0.0, 10, 0.01)


def test_zero_variance_column_pinned_with_warning():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((30, 3))
    x[:, 1] = 4.0
    y = x[:, 0] + 0.1 * rng.standard_normal(30)
    with pytest.warns(RuntimeWarning):
        fit = fit_lasso(DesignSpec(y, np.empty((30, 0)), x), 0.01)
    assert fit.penalized_coefs[1] == 0
    assert fit.zero_variance_cols == (1,)


def test_row_mismatch_rejected():
    with pytest.raises(DataValidationError):
        DesignSpec(np.zeros(5), np.zeros((4, 1)), np.zeros((5, 2)))


def test_warm_start_matches_cold_start():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((80, 40))
    y = x[:, :4] @ [2, -1, 1, 0.5] + rng.standard_normal(80)
    spec = DesignSpec(y, np.empty((80, 0)), x)
    grid = build_lambda_grid(lambda_max(spec), 15, 0.01)
    warm = fit_path(spec, grid, tol=1e-10)
    for lam, wf in zip(grid, warm):
        cold = fit_lasso(spec, lam, tol=1e-10)
        np.testing.assert_allclose(wf.penalized_coefs, cold.penalized_coefs, atol=1e-6)


def test_penalized_guess_at_zero_lambda_matches_unpenalized():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((50, 5))
    guess = rng.standard_normal(50)
    y = guess + x[:, 0] + rng.standard_normal(50)
    a = fit_lasso(DesignSpec(y, guess.reshape(-1, 1), x), 0.0, tol=1e-12)
    b = fit_lasso(DesignSpec(y, np.empty((50, 0)), np.column_stack([guess, x])), 0.0, tol=1e-12)
    np.testing.assert_allclose(a.unpenalized_coefs[0], b.penalized_coefs[0], atol=1e-6)
    np.testing.assert_allclose(a.penalized_coefs, b.penalized_coefs[1:], atol=1e-6)


def test_objective_beats_perturbations():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((40, 8))
    u = rng.standard_normal((40, 1))
    y = x[:, 0] - x[:, 3] + u[:, 0] + rng.standard_normal(40)
    spec = DesignSpec(y, u, x)
    fit = fit_lasso(spec, 0.1, tol=1e-12)
    best = objective(spec, fit)
    for _ in range(50):
        step = 1e-3 * rng.standard_normal(8)
        other = type(fit)(
            intercept=fit.intercept,
            unpenalized_coefs=fit.unpenalized_coefs,
            penalized_coefs=fit.penalized_coefs + step,
            lambda_=fit.lambda_,
            n_iterations=0,
            converged=True,
            active_set_size=0,
        )
        assert objective(spec, other) >= best - 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(10, 60), st.integers(1, 30), st.floats(0.01, 0.9))
def test_kkt_holds_on_random_instances(seed, m, p, frac):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((m, p))
    y = x[:, 0] + rng.standard_normal(m)
    u = rng.standard_normal((m, 1))
    spec = DesignSpec(y, u, x)
    lmax = lambda_max(spec)
    if lmax == 0:
        return
    fit = fit_lasso(spec, frac * lmax, tol=1e-10, max_iter=100_000)
    if fit.converged:
        assert kkt_violation(spec, fit) < 1e-6


def test_cv_pure_noise_picks_heavy_shrinkage():
    # Most pure-noise instances land within one grid step of lambda_max.
    rng = np.random.default_rng(11)
    hits = 0
    for _ in range(20):
        x = rng.standard_normal((60, 20))
        y = rng.standard_normal(60)
        spec = DesignSpec(y, np.empty((60, 0)), x)
        grid = build_lambda_grid(lambda_max(spec), 20, 0.01)
        path = select_lambda_cv(spec, grid, "kfold:5", seed=1)
        if path.chosen_index == 0:
            assert np.all(fit_lasso(spec, path.chosen_lambda).penalized_coefs == 0)
        hits += path.chosen_index <= 1
    assert hits > 10


def test_cv_noiseless_linear_picks_small_lambda():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((40, 10))
    y = 3 * x[:, 0] - 2 * x[:, 1]
    spec = DesignSpec(y, np.empty((40, 0)), x)
    grid = build_lambda_grid(lambda_max(spec), 30, 1e-5)
    path = select_lambda_cv(spec, grid, "loocv", tol=1e-12)
    assert path.chosen_index >= len(grid) - 2
    fit = fit_lasso(spec, path.chosen_lambda, tol=1e-12)
    np.testing.assert_allclose(fit.penalized_coefs[:2], [3, -2], atol=1e-3)


def test_cv_single_point_grid():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((15, 3))
    path = select_lambda_cv(DesignSpec(rng.standard_normal(15), np.empty((15, 0)), x), [0.5])
    assert path.chosen_index == 0


def test_cv_rejects_increasing_grid():
    x = np.random.default_rng(0).standard_normal((10, 2))
    with pytest.raises(ValueError):
        select_lambda_cv(DesignSpec(np.arange(10.0), np.empty((10, 0)), x), [0.1, 0.2])


def test_cv_ties_break_to_largest_lambda():
    # Response orthogonal to all variation: every lambda gives the same fit.
    x = np.tile([[1.0], [-1.0]], (6, 1))
    y = np.tile([1.0, 1.0, -1.0, -1.0], 3)
    spec = DesignSpec(y, np.empty((12, 0)), x)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        path = select_lambda_cv(spec, [0.3, 0.2, 0.1], "loocv")
    errors = path.cv_errors
    assert path.chosen_index == int(np.flatnonzero(errors == errors.min())[0])
