"""Acceptance suite: one printed PASS/FAIL line per criterion.

Run ``pytest tests/test_acceptance.py -v`` (the lines are printed even under
output capture).  Criteria 4 and 5 run 20 full simulation replications each
and take several minutes on one core.
"""

import json
import math
import time
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
from conftest import make_stack
from oracles import (
    FROZEN,
    ard_moments,
    conjugate_problem,
    frozen_precision,
    horseshoe_moments,
    multilaplace_moments,
    one_dim_problem,
    ridge_posterior,
    spike_laplace_moments,
    spike_normal_moments,
)
from scipy import stats

from bmilasso.cli import main
from bmilasso.data import ImputedStack, emit_incomplete, emit_stack, standardize
from bmilasso.hyperopt import Dimension, SearchSpace, optimize
from bmilasso.imputation import MiceConfig, impute
from bmilasso.milasso import _centered, default_lambda_grid, fit_milasso, kkt_violation, stacked_gradient
from bmilasso.models import LatentState, ModelSpec, fit, update_horseshoe_locals
from bmilasso.sampling import ChainConfig, make_rng
from bmilasso.selection import degrees_of_freedom, modified_bic, ols_per_dataset, pool, scan_intervals
from bmilasso.simulation import (
    ExperimentConfig,
    best_row,
    generate,
    impose_missing,
    run_experiment,
    scenario_a,
    scenario_c,
)


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:2d} {'PASS' if ok else 'FAIL'}: {title}: {detail}")
        assert ok, detail

    return emit


def test_criterion_01_conjugate_oracle(verdict):
    t0 = time.time()
    stack = conjugate_problem()
    worst_z, worst_var = 0.0, 0.0
    for kind, (frozen, init) in FROZEN.items():
        init = {**init, "sigma2": 1.3}
        spec = ModelSpec(kind)
        draws = fit(spec, stack, ChainConfig(n_chains=4, burn_in=10, kept=2000, seed=5), frozen=("sigma2", *frozen), init=init)
        for d in range(stack.D):
            mean, cov = ridge_posterior(stack.X[d], stack.Y[d], 1.3, frozen_precision(kind, init, spec))
            b = draws.beta[:, :, d, :].reshape(-1, 3)
            z = np.abs(b.mean(axis=0) - mean) / np.sqrt(np.diag(cov) / b.shape[0])
            rel = np.abs(b.var(axis=0, ddof=1) / np.diag(cov) - 1)
            worst_z, worst_var = max(worst_z, z.max()), max(worst_var, rel.max())
    elapsed = time.time() - t0
    ok = worst_z < 3 and worst_var < 0.1 and elapsed < 60
    verdict(1, "conjugate oracle", ok, f"max |z| {worst_z:.2f} (< 3), max var rel err {worst_var:.3f} (< 0.10), {elapsed:.0f}s")


def test_criterion_02_grid_oracle(verdict):
    t0 = time.time()
    cfg = ChainConfig(n_chains=4, burn_in=1000, kept=10000, thin=5, seed=1)
    moderate = one_dim_problem()
    strong = one_dim_problem(noise=0.25)
    # inclusion near 0.8: with inclusion near 1 the rare gamma = 0 visits carry
    # a large share of the variance and 8k draws cannot pin their frequency
    mixed = one_dim_problem(seed=15, slope=0.5, noise=1.0)
    cases = [
        ("MultiLaplace", moderate, multilaplace_moments),
        ("Horseshoe", moderate, horseshoe_moments),
        ("ARD", strong, ard_moments),
        ("SpikeNormal", mixed, spike_normal_moments),
        ("SpikeLaplace", mixed, spike_laplace_moments),
    ]
    errors = {}
    for kind, (stack, x, y), oracle in cases:
        ref = oracle(x, y)
        b = fit(ModelSpec(kind), stack, cfg).beta[..., 0, 0].ravel()
        assert b.size == 8000
        errors[kind] = max(abs(b.mean() / ref[0] - 1), abs(b.std(ddof=1) / ref[1] - 1))
    # the truncated ARD prior must not drive the reference
    x, y = strong[1], strong[2]
    ard_shift = abs(ard_moments(x, y, 1e-8)[0] / ard_moments(x, y, 1e-4)[0] - 1)
    elapsed = time.time() - t0
    ok = max(errors.values()) < 0.02 and ard_shift < 1e-3 and elapsed < 300
    detail = ", ".join(f"{k} {100 * v:.2f}%" for k, v in errors.items())
    verdict(2, "grid oracle", ok, f"max rel err of mean/sd: {detail} (< 2%), {elapsed:.0f}s")


def test_criterion_03_horseshoe_prior_shape(verdict):
    """Prior-only Gibbs over (beta, lambda2, nu) with tau fixed at 1; shrinkage factor k ~ Beta(1/2, 1/2)."""
    t0 = time.time()
    rng = make_rng(0, 0)
    p = 100_000
    dims = SimpleNamespace(D=1, p=p)
    s = LatentState(beta=np.zeros((1, p)), sigma2=1.0, lambda2=np.ones(p), tau2=1.0, nu=np.ones(p), xi=1.0)
    for _ in range(300):
        beta = np.sqrt(s.tau2 * s.lambda2) * rng.standard_normal((1, p))
        s = replace(update_horseshoe_locals(replace(s, beta=beta), dims, rng), tau2=1.0, xi=1.0)
    ks = stats.kstest(1 / (1 + s.lambda2), stats.beta(0.5, 0.5).cdf).statistic
    elapsed = time.time() - t0
    verdict(3, "horseshoe prior shape", ks < 0.02 and elapsed < 30, f"KS {ks:.4f} (< 0.02) over {p} draws, {elapsed:.0f}s")


def _table_x(result, arm):
    return next(s.x_pct for s in result.summary if s.arm == arm)


def _replication_mse(rep, arm):
    return best_row(rep.scans[arm]).MSE if arm in rep.scans else rep.rows[arm].MSE


@pytest.mark.slow
def test_criterion_04_simulation_a(verdict):
    t0 = time.time()
    result = run_experiment(ExperimentConfig(scenario_a(0.1, replications=20, seed=2024)))
    means = {s.arm: s.means for s in result.summary}
    ml, mi = means["Multi-Laplace"], means["MI-LASSO"]
    cc_worst = 0
    for rep in result.replications:
        if rep.error is None:
            mses = {arm: _replication_mse(rep, arm) for arm in means}
            cc_worst += max(mses, key=mses.get) == "CC-LASSO"
    ok = (
        86 <= 100 * ml["SEN"] <= 100
        and 82 <= 100 * ml["SPE"] <= 100
        and 85 <= 100 * mi["SEN"] <= 100
        and 73 <= 100 * mi["SPE"] <= 92
        and cc_worst >= 15
        and result.failures == 0
    )
    detail = (
        f"Multi-Laplace SEN {100 * ml['SEN']:.1f} SPE {100 * ml['SPE']:.1f} (mean x {_table_x(result, 'Multi-Laplace'):.1f}); "
        f"MI-LASSO SEN {100 * mi['SEN']:.1f} SPE {100 * mi['SPE']:.1f}; CC-LASSO worst MSE in {cc_worst}/20; "
        f"{time.time() - t0:.0f}s"
    )
    verdict(4, "simulation A bands", ok, detail)


@pytest.mark.slow
def test_criterion_05_simulation_c_ordering(verdict):
    t0 = time.time()
    exp = ExperimentConfig(scenario_c(replications=20, seed=2024), arms=("Multi-Laplace", "MI-LASSO"))
    result = run_experiment(exp)
    means = {s.arm: s.means for s in result.summary}
    gap = 100 * (means["Multi-Laplace"]["SEN"] - means["MI-LASSO"]["SEN"])
    detail = (
        f"Multi-Laplace SEN {100 * means['Multi-Laplace']['SEN']:.1f} (mean x {_table_x(result, 'Multi-Laplace'):.1f}) "
        f"vs MI-LASSO {100 * means['MI-LASSO']['SEN']:.1f}: gap {gap:.1f} (>= 20); {time.time() - t0:.0f}s"
    )
    verdict(5, "simulation C ordering", gap >= 20, detail)


def test_criterion_06_scan_monotonicity(verdict):
    cfg = scenario_a(0.1)
    data, truth = generate(cfg, make_rng(7, 0))
    inc = impose_missing(data, cfg.missing, make_rng(7, 1))
    stack = impute(inc, MiceConfig(D=5, seed=7))
    failures = []
    for kind in ("MultiLaplace", "Horseshoe", "ARD"):
        draws = fit(ModelSpec(kind), stack, ChainConfig(n_chains=2, burn_in=500, kept=1000, seed=3))
        rows = scan_intervals(pool(draws), truth=truth)
        size = [int(r.selected.sum()) for r in rows]
        sen = [r.sen for r in rows]
        spe = [r.spe for r in rows]
        if any(a < b for a, b in zip(size, size[1:])):
            failures.append(f"{kind} size")
        if any(a < b for a, b in zip(sen, sen[1:])) or any(a > b for a, b in zip(spe, spe[1:])):
            failures.append(f"{kind} SEN/SPE")
    verdict(6, "interval-scan monotonicity", not failures, "exact over the 5..95 grid" if not failures else ", ".join(failures))


def test_criterion_07_milasso_kkt(verdict):
    cfg = scenario_a(0.1)
    data, _ = generate(cfg, make_rng(11, 0))
    inc = impose_missing(data, cfg.missing, make_rng(11, 1))
    stack, _ = standardize(impute(inc, MiceConfig(D=5, seed=11)))
    worst_kkt, worst_rise, n_conv = 0.0, 0.0, 0
    for lam in default_lambda_grid(stack):
        fit_ = fit_milasso(stack, float(lam))
        if fit_.converged:
            n_conv += 1
            worst_kkt = max(worst_kkt, kkt_violation(stack, fit_))
        path = np.array(fit_.objective_path)
        worst_rise = max(worst_rise, float(np.max(np.diff(path) / path[:-1], initial=0.0)))
    Xc, Yc, _, _ = _centered(stack)
    ols_grad = float(np.max(np.abs(stacked_gradient(Xc, Yc, fit_milasso(stack, 0.0).beta))))
    ok = n_conv == 50 and worst_kkt < 1e-4 and worst_rise <= 1e-12 and ols_grad < 1e-8
    detail = f"{n_conv}/50 converged, max KKT {worst_kkt:.2e} (< 1e-4), max relative objective rise {worst_rise:.1e}, OLS gradient {ols_grad:.1e} (< 1e-8)"
    verdict(7, "MI-LASSO KKT certificate", ok, detail)


def test_criterion_08_modified_bic_hand_check(verdict):
    X = np.array([[[1.0], [2.0], [3.0], [5.0]], [[0.0], [2.0], [4.0], [5.0]]])
    Y = np.array([[1.0, 3.0, 2.0, 6.0], [0.5, 1.0, 3.5, 4.0]])
    stack = ImputedStack.from_arrays(X, Y)
    # by hand: OLS slopes, then half of each as the shrunken estimate
    rss, slopes = 0.0, []
    for d in range(2):
        x, y = X[d, :, 0], Y[d]
        sxx = np.sum((x - x.mean()) ** 2)
        b_ols = np.sum((x - x.mean()) * (y - y.mean())) / sxx
        slopes.append(b_ols)
        b = 0.5 * b_ols
        rss += np.sum((y - y.mean() - b * (x - x.mean())) ** 2)
    df = 1 + 0.5 * (2 - 1)
    expected = math.log(rss / 8) + df * math.log(8) / 8
    beta_bar = 0.5 * np.array(slopes)[:, None]
    got = modified_bic(stack, beta_bar)
    df_got = degrees_of_freedom(beta_bar, ols_per_dataset(stack)[1])
    err = abs(got - expected)
    verdict(8, "modified BIC hand check", err <= 1e-12 and abs(df_got - 1.5) <= 1e-12, f"BIC {got:.15f} vs {expected:.15f}, |diff| {err:.1e}, df {df_got}")


def test_criterion_09_bayesian_optimization(verdict):
    t0 = time.time()
    space = SearchSpace((Dimension("x", 0.0, 1.0),))
    best, trace = optimize(space, lambda pt: (pt["x"] - 0.3) ** 2, budget=20, seed=0)
    b = trace.best_so_far
    monotone = all(u >= v for u, v in zip(b, b[1:]))
    elapsed = time.time() - t0
    ok = abs(best["x"] - 0.3) < 0.05 and monotone and elapsed < 60
    verdict(9, "Bayesian optimization sanity", ok, f"best x {best['x']:.4f} (|x-0.3| < 0.05), monotone trace {monotone}, {elapsed:.0f}s")


def _tree(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


def test_criterion_10_determinism(verdict, tmp_path):
    cfg = scenario_a()
    data, _ = generate(cfg, make_rng(1, 0))
    emit_incomplete(impose_missing(data, cfg.missing, make_rng(1, 1)), tmp_path / "data.csv", tmp_path / "mask.csv")
    emit_stack(make_stack(D=2, n=60, p=4, beta=[2.0, 0.0, -1.0, 0.0], seed=3), tmp_path / "stack.csv")
    chain = {"n_chains": 2, "burn_in": 50, "kept": 150}
    configs = {
        "simulate": {"scenario": {"replications": 2}, "chain": chain, "mice": {"D": 2, "cycles": 2}},
        "impute": {"data": "data.csv", "mask": "mask.csv", "mice": {"D": 3, "cycles": 3}},
        "fit": {"stack": "stack.csv", "model": {"kind": "Horseshoe"}, "chain": chain, "save_draws": True},
        "select": {"stack": "stack.csv", "model": {"kind": "MultiLaplace"}, "chain": chain},
        "tune": {"stack": "stack.csv", "model": "SpikeLaplace", "chain": chain, "budget": 4},
        "report": {"logs": "simulate_1/logs"},
    }
    differing = []
    for command, body in configs.items():
        path = tmp_path / f"{command}.json"
        path.write_text(json.dumps(body))
        trees = []
        for threads in ("1", "8"):
            out = tmp_path / f"{command}_{threads}"
            code = main([command, "--config", str(path), "--out", str(out), "--seed", "42", "--threads", threads])
            assert code == 0, f"{command} exited {code}"
            trees.append(_tree(out))
        if trees[0] != trees[1] or not trees[0]:
            differing.append(command)
    ok = not differing
    verdict(10, "determinism across --threads", ok, "all six commands byte-identical" if ok else f"differ: {differing}")


def test_criterion_11_imputation_contract(verdict):
    problems = []
    for name, cfg in (("A", scenario_a()), ("C", scenario_c())):
        data, _ = generate(cfg, make_rng(5, 0))
        inc = impose_missing(data, cfg.missing, make_rng(5, 1))
        stack = impute(inc, MiceConfig(D=5, seed=5))
        obs = inc.R == 1
        for d, ds in enumerate(stack.datasets):
            if not np.array_equal(ds.X[obs], inc.X[obs]) or not np.array_equal(ds.y, inc.y):
                problems.append(f"{name}: observed cells changed in d={d + 1}")
            for j in range(inc.p):
                filled = set(ds.X[~obs[:, j], j])
                if inc.column_kinds[j] == "binary":
                    if not filled <= {0.0, 1.0}:
                        problems.append(f"{name}: column {j + 1} left binary support")
                elif not filled <= set(inc.X[obs[:, j], j]):
                    problems.append(f"{name}: column {j + 1} imputed a non-donor value")
    verdict(11, "imputation contract", not problems, "exact on scenarios A and C, D=5" if not problems else "; ".join(problems[:3]))
