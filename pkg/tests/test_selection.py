import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bmilasso.data import ImputedStack
from bmilasso.sampling import PosteriorDraws
from bmilasso.selection import (
    X_GRID,
    bic_for_selection,
    degrees_of_freedom,
    inclusion_probabilities,
    interval,
    modified_bic,
    ols_per_dataset,
    pool,
    scan_intervals,
    select_by_interval,
    select_by_median_indicator,
    sen_spe,
)


def draws_from(beta, gamma=None, model="MultiLaplace"):
    beta = np.asarray(beta, dtype=float)
    aux = {} if gamma is None else {"gamma": np.asarray(gamma)}
    return PosteriorDraws(model, beta, np.ones(beta.shape[:2]), aux)


def test_pool_order_and_mean():
    rng = np.random.default_rng(0)
    beta = rng.normal(size=(2, 150, 3, 4))
    pooled = pool(draws_from(beta))
    assert pooled.beta.shape == (4, 900)
    # d-major, chain-minor
    np.testing.assert_array_equal(pooled.beta[1, :150], beta[0, :, 0, 1])
    np.testing.assert_array_equal(pooled.beta[1, 150:300], beta[1, :, 0, 1])
    np.testing.assert_array_equal(pooled.beta[1, 300:450], beta[0, :, 1, 1])
    per_d = beta.mean(axis=(0, 1)).mean(axis=0)
    np.testing.assert_allclose(pooled.mean(), per_d, rtol=1e-12)


def test_interval_is_type7_quantile():
    beta = np.arange(1.0, 401.0).reshape(2, 200, 1, 1)
    lo, hi = interval(pool(draws_from(beta)), 90)
    assert lo[0] == pytest.approx(np.quantile(np.arange(1.0, 401.0), 0.05))
    assert hi[0] == pytest.approx(1.0 + 0.95 * 399)


def test_select_by_interval_needs_draws():
    with pytest.raises(ValueError, match="at least 200"):
        select_by_interval(pool(draws_from(np.zeros((1, 150, 1, 2)))), 95)


def test_scan_monotone_in_x():
    rng = np.random.default_rng(1)
    means = np.array([3.0, 1.0, 0.5, 0.2, 0.0, -0.8])
    beta = means + rng.normal(size=(2, 500, 2, 6))
    rows = scan_intervals(pool(draws_from(beta)), truth=means != 0)
    counts = [r.selected.sum() for r in rows]
    assert [r.x_pct for r in rows] == list(map(float, X_GRID))
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert sum(r.best for r in rows) == 1


def test_scan_ties_go_to_larger_x():
    beta = np.broadcast_to(np.array([5.0, 0.0]), (2, 200, 1, 2)).copy()
    beta[..., 0] += np.linspace(-0.1, 0.1, 200)[:, None]
    beta[..., 1] += np.linspace(-0.1, 0.1, 200)[:, None]
    rows = scan_intervals(pool(draws_from(beta)), truth=[True, False])
    assert rows[-1].best and rows[-1].distance == pytest.approx(math.sqrt(2))


def test_scan_by_bic_picks_minimum():
    beta = np.random.default_rng(2).normal(size=(2, 200, 1, 3)) + [2.0, 0.4, 0.0]
    rows = scan_intervals(pool(draws_from(beta)), bic_fn=lambda sel: abs(int(sel.sum()) - 1))
    best = next(r for r in rows if r.best)
    assert best.selected.sum() == 1
    assert best.x_pct == max(r.x_pct for r in rows if r.bic == 0)


def test_sen_spe_conventions():
    assert sen_spe([1, 0, 1, 0], [1, 1, 0, 0]) == (0.5, 0.5)
    assert sen_spe([0, 0], [0, 0]) == (1.0, 1.0)
    assert sen_spe([1, 1], [1, 1]) == (1.0, 1.0)


def test_median_indicator_strict_threshold():
    gamma = np.zeros((2, 100, 3), dtype=int)
    gamma[:, :50, 0] = 1  # exactly 0.5
    gamma[:, :51, 1] = 1  # 0.51
    beta = np.where(gamma[:, :, None, :] == 1, 1.0, 0.0) * np.ones((1, 1, 2, 1))
    draws = draws_from(beta, gamma, "SpikeNormal")
    np.testing.assert_allclose(inclusion_probabilities(draws), [0.5, 0.51, 0.0])
    assert select_by_median_indicator(draws).selected.tolist() == [False, True, False]


def test_median_indicator_rejects_shrinkage_models():
    with pytest.raises(ValueError, match="spike-and-slab"):
        select_by_median_indicator(draws_from(np.zeros((1, 200, 1, 2))))


def test_modified_bic_hand_example():
    X = np.array([[[1.0], [2.0], [3.0], [5.0]], [[0.0], [2.0], [4.0], [5.0]]])
    Y = np.array([[1.0, 3.0, 2.0, 6.0], [0.5, 1.0, 3.5, 4.0]])
    stack = ImputedStack.from_arrays(X, Y)
    _, b_ols, _ = ols_per_dataset(stack)
    beta_bar = 0.5 * b_ols
    assert degrees_of_freedom(beta_bar, b_ols) == pytest.approx(1.5, abs=1e-12)
    rss = 0.0
    for d in range(2):
        x, y = X[d, :, 0], Y[d]
        b = 0.5 * np.polyfit(x, y, 1)[0]
        a = y.mean() - b * x.mean()
        rss += np.sum((y - a - b * x) ** 2)
    expected = math.log(rss / 8) + 1.5 * math.log(8) / 8
    assert modified_bic(stack, beta_bar) == pytest.approx(expected, abs=1e-12)


def test_df_falls_back_without_ols():
    assert degrees_of_freedom(np.array([[1.0, 0.0], [2.0, 0.0]]), None) == 2.0


def test_bic_refit_prefers_true_support():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(3, 60, 4))
    Y = X @ np.array([2.0, 0.0, -1.0, 0.0]) + rng.normal(size=(3, 60))
    stack = ImputedStack.from_arrays(X, Y)
    good = bic_for_selection(stack, None, [True, False, True, False], mode="refit")
    for other in ([True, False, False, False], [False, False, True, False], [False] * 4):
        assert good < bic_for_selection(stack, None, other, mode="refit")


@settings(max_examples=25, deadline=None)
@given(st.permutations(range(4)))
def test_selection_invariant_to_column_order(perm):
    rng = np.random.default_rng(5)
    beta = rng.normal(size=(2, 120, 2, 4)) * 0.3 + [1.0, 0.0, -0.7, 0.05]
    base = select_by_interval(pool(draws_from(beta)), 90).selected
    permuted = select_by_interval(pool(draws_from(beta[..., list(perm)])), 90).selected
    assert permuted.tolist() == base[list(perm)].tolist()


def test_selection_result_json_roundtrip():
    import json

    beta = np.random.default_rng(6).normal(size=(2, 100, 1, 2)) + [3.0, 0.0]
    res = select_by_interval(pool(draws_from(beta)), 95)
    doc = json.loads(res.to_json())
    assert doc["rule"] == "credible_interval(95%)"
    assert [c["selected"] for c in doc["covariates"]] == [True, False]


def test_pooled_bimodal_quantiles_match_concatenation():
    rng = np.random.default_rng(5)
    beta = np.empty((2, 500, 2, 1))
    beta[:, :, 0, 0] = rng.normal(-3, 0.5, size=(2, 500))
    beta[:, :, 1, 0] = rng.normal(2, 1.0, size=(2, 500))
    lo, hi = interval(pool(draws_from(beta)), 95)
    ref = np.sort(beta[..., 0].ravel())
    k = (ref.size - 1) * np.array([0.025, 0.975])
    expect = ref[np.floor(k).astype(int)] + (k - np.floor(k)) * (ref[np.ceil(k).astype(int)] - ref[np.floor(k).astype(int)])
    np.testing.assert_allclose([lo[0], hi[0]], expect, rtol=0, atol=1e-12)


def test_x95_against_normal_quantiles():
    # lower 2.5% point is 1 - 1.96 * 0.25 = 0.51 > 0 and 0.1 - 0.49 < 0
    rng = np.random.default_rng(6)
    beta = np.column_stack([rng.normal(1.0, 0.25, 10_000), rng.normal(0.1, 0.25, 10_000)])
    sel = select_by_interval(pool(draws_from(beta[None, :, None, :])), 95).selected
    assert sel.tolist() == [True, False]
