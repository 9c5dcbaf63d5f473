import numpy as np
import pytest

from bmilasso.data import BINARY, Dataset, IncompleteDataset
from bmilasso.imputation import MiceConfig, draw_linear, fit_logistic, impute, pmm
from bmilasso.simulation import generate, impose_missing, scenario_a, scenario_c


def _incomplete(cfg, seed):
    data, _ = generate(cfg, np.random.default_rng(seed))
    return impose_missing(data, cfg.missing, np.random.default_rng(seed + 1))


def test_observed_cells_unchanged_and_values_from_donors():
    inc = _incomplete(scenario_a(), 0)
    stack = impute(inc, MiceConfig(D=3, cycles=3, seed=1))
    obs = inc.R == 1
    for ds in stack.datasets:
        assert np.array_equal(ds.X[obs], inc.X[obs])
        assert np.array_equal(ds.y, inc.y)
        for j in range(10, 20):
            donors = set(inc.X[obs[:, j], j])
            assert set(ds.X[~obs[:, j], j]) <= donors


def test_binary_columns_stay_binary():
    inc = _incomplete(scenario_c(), 3)
    stack, flags = impute(inc, MiceConfig(D=2, cycles=3, seed=2), return_flags=True)
    assert all(k == BINARY for k in inc.column_kinds)
    for ds in stack.datasets:
        assert set(np.unique(ds.X)) <= {0.0, 1.0}


def test_imputations_differ_and_are_reproducible():
    inc = _incomplete(scenario_a(), 5)
    a = impute(inc, MiceConfig(D=4, cycles=3, seed=9))
    b = impute(inc, MiceConfig(D=4, cycles=3, seed=9))
    assert np.array_equal(a.X, b.X)
    miss = inc.R == 0
    vals = a.X[:, miss]
    assert np.mean(np.ptp(vals, axis=0) > 0) > 0.5


def test_no_missing_gives_identical_copies():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 3))
    inc = IncompleteDataset.from_dataset(Dataset(X, rng.normal(size=30)), np.ones((30, 3), dtype=np.int8))
    stack = impute(inc, MiceConfig(D=3))
    assert stack.D == 3 and all(np.array_equal(ds.X, X) for ds in stack.datasets)


def test_too_few_observed_raises():
    rng = np.random.default_rng(0)
    R = np.ones((20, 2), dtype=np.int8)
    R[4:, 1] = 0
    inc = IncompleteDataset.from_dataset(Dataset(rng.normal(size=(20, 2)), rng.normal(size=20)), R)
    with pytest.raises(ValueError, match="at least 5"):
        impute(inc)


def test_pmm_ties_resolve_to_lower_index():
    rng = np.random.default_rng(0)
    out = pmm(np.array([1.0, 1.0, 1.0, 5.0]), np.array([1.0]), np.array([10.0, 20.0, 30.0, 40.0]), 1, rng)
    assert out[0] == 10.0


def test_draw_linear_centers_on_least_squares():
    rng = np.random.default_rng(1)
    A = np.column_stack([np.ones(200), rng.normal(size=200)])
    t = A @ [1.0, 2.0] + 0.5 * rng.normal(size=200)
    draws = np.array([draw_linear(A, t, rng)[1] for _ in range(2000)])
    beta_hat = np.linalg.lstsq(A, t, rcond=None)[0]
    np.testing.assert_allclose(draws.mean(axis=0), beta_hat, atol=0.01)


def test_logistic_mode_matches_score_equation():
    rng = np.random.default_rng(2)
    A = np.column_stack([np.ones(300), rng.normal(size=300)])
    t = (rng.random(300) < 1 / (1 + np.exp(-(A @ [0.3, 1.0])))).astype(float)
    beta, _, ok = fit_logistic(A, t)
    mu = 1 / (1 + np.exp(-(A @ beta)))
    assert ok and np.max(np.abs(A.T @ (t - mu))) < 1e-6


def test_separated_binary_column_uses_ridge():
    rng = np.random.default_rng(3)
    n = 40
    x1 = rng.normal(size=n)
    x2 = (x1 > 0).astype(float)
    y = x1 + 0.1 * rng.normal(size=n)
    R = np.ones((n, 2), dtype=np.int8)
    R[:6, 1] = 0
    inc = IncompleteDataset.from_dataset(Dataset(np.column_stack([x1, x2]), y), R)
    with pytest.warns(RuntimeWarning, match="ridge"):
        stack, flags = impute(inc, MiceConfig(D=2, cycles=2), return_flags=True)
    assert flags.any
    assert set(np.unique(stack.X[:, :, 1])) <= {0.0, 1.0}


def test_mcar_imputed_mean_is_calibrated():
    diffs = []
    for r in range(50):
        rng = np.random.default_rng(700 + r)
        X = rng.normal(size=(100, 3))
        y = X[:, 0] + X[:, 1] + rng.normal(size=100)
        R = np.ones((100, 3), dtype=int)
        R[rng.choice(100, 5, replace=False), 2] = 0
        stack = impute(IncompleteDataset(X, y, R), MiceConfig(D=2, cycles=3, seed=r))
        miss = R[:, 2] == 0
        diffs.append(stack.X[:, miss, 2].mean() - X[~miss, 2].mean())
    assert abs(np.mean(diffs)) < 0.15
