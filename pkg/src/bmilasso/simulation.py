"""Simulation scenarios, missingness mechanisms, metrics and the experiment loop.

Scenario A draws Gaussian covariates with compound-symmetry correlation,
scenario B with AR(1) correlation, and scenario C dichotomizes scenario B's
covariates at zero.  The outcome is ``X beta + eps`` with
``var(eps) = beta' Sigma beta`` (signal-to-noise ratio one in the latent
scale).  Each replication runs generate -> mask -> impute -> fit every arm
-> select -> refit -> evaluate.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import expit

from .data import Dataset, ImputedStack, IncompleteDataset, standardize
from .imputation import MiceConfig, impute
from .milasso import milasso_selection, tune_lasso, tune_milasso
from .models import ModelSpec, fit
from .sampling import ChainConfig, make_rng
from .selection import (
    choose_interval_by_bic,
    distance,
    pool,
    scan_intervals,
    select_by_median_indicator,
    sen_spe,
)

MCAR, MAR = "MCAR", "MAR"
COMPOUND, AR1 = "compound_symmetry", "ar1"
MASK_RETRIES = 100
MIN_OBSERVED = 5

# substream keys under the replication seed
_S_DATA, _S_MASK, _S_IMPUTE, _S_MCMC = 1, 2, 3, 4

BAYES_ARMS = {
    "Multi-Laplace": "MultiLaplace",
    "Horseshoe": "Horseshoe",
    "ARD": "ARD",
    "Spike-Normal": "SpikeNormal",
    "Spike-Laplace": "SpikeLaplace",
}
DEFAULT_ARMS = ("Multi-Laplace", "Horseshoe", "ARD", "Spike-Normal", "Spike-Laplace", "MI-LASSO", "LASSO", "CC-LASSO")
OPTIONAL_ARMS = ("BLASSO", "BLASSO(CI)")
X_RULES = ("per_replication", "averaged")
CI_ARMS = ("Multi-Laplace", "Horseshoe", "ARD", "BLASSO(CI)")


@dataclass(frozen=True)
class MissingSpec:
    """Missingness on 1-based ``target_cols``; MAR column ``j`` is driven by ``j - 10`` and ``y``."""

    mechanism: str = MCAR
    target_cols: tuple[int, ...] = tuple(range(11, 21))
    mcar_frac: float = 0.05
    alpha0: float = -4.0
    slopes: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        if self.mechanism not in (MCAR, MAR):
            raise ValueError(f"mechanism must be MCAR or MAR, got {self.mechanism!r}")
        if not 0 <= self.mcar_frac < 1:
            raise ValueError("mcar_frac must lie in [0, 1)")
        object.__setattr__(self, "target_cols", tuple(int(c) for c in self.target_cols))
        if self.mechanism == MAR:
            drivers = {c - 10 for c in self.target_cols}
            if min(drivers, default=1) < 1 or drivers & set(self.target_cols):
                raise ValueError("MAR driver columns (target - 10) must exist and stay fully observed")


@dataclass(frozen=True)
class ScenarioConfig:
    n: int = 100
    p: int = 20
    corr: float = 0.1
    cov_kind: str = COMPOUND
    beta_true: tuple[float, ...] = ()
    binary: bool = False
    missing: MissingSpec = field(default_factory=MissingSpec)
    replications: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n < 2 or self.p < 1:
            raise ValueError("n >= 2 and p >= 1 required")
        if not 0 <= self.corr < 1:
            raise ValueError("corr must lie in [0, 1)")
        if self.cov_kind not in (COMPOUND, AR1):
            raise ValueError(f"cov_kind must be {COMPOUND!r} or {AR1!r}")
        beta = tuple(float(b) for b in self.beta_true) or default_beta(self.p)
        if len(beta) != self.p:
            raise ValueError(f"beta_true has length {len(beta)}, expected p={self.p}")
        object.__setattr__(self, "beta_true", beta)
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if max(self.missing.target_cols, default=1) > self.p or min(self.missing.target_cols, default=1) < 1:
            raise ValueError("target columns must lie within 1..p")
        np.linalg.cholesky(covariance(self))

    @property
    def truth(self) -> np.ndarray:
        return np.asarray(self.beta_true) != 0


def default_beta(p: int) -> tuple[float, ...]:
    active = {1, 2, 5, 11, 12, 15}
    if p >= 40:
        active |= {21, 22, 25, 31, 32, 35}
    return tuple(1.0 if j + 1 in active else 0.0 for j in range(p))


def scenario_a(rho: float = 0.1, mechanism: str = MCAR, **kw) -> ScenarioConfig:
    return ScenarioConfig(corr=rho, cov_kind=COMPOUND, missing=_missing(20, mechanism, False), **kw)


def scenario_b(n: int = 100, p: int = 20, high_missing: bool = False, mechanism: str = MCAR, **kw) -> ScenarioConfig:
    return ScenarioConfig(n=n, p=p, corr=0.5, cov_kind=AR1, missing=_missing(p, mechanism, high_missing), **kw)


def scenario_c(mechanism: str = MCAR, **kw) -> ScenarioConfig:
    return ScenarioConfig(corr=0.5, cov_kind=AR1, binary=True, missing=_missing(20, mechanism, False), **kw)


def _missing(p: int, mechanism: str, high: bool) -> MissingSpec:
    targets = tuple(range(11, 21)) + (tuple(range(31, 41)) if p >= 40 else ())
    frac = 0.025 if p >= 40 else 0.05
    return MissingSpec(mechanism, targets, frac, -1.8 if high else -4.0)


def covariance(cfg: ScenarioConfig) -> np.ndarray:
    """Latent Gaussian covariance of the covariates."""
    p, rho = cfg.p, cfg.corr
    if cfg.cov_kind == COMPOUND:
        return np.full((p, p), rho) + (1 - rho) * np.eye(p)
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def binary_covariance(latent: np.ndarray) -> np.ndarray:
    """Covariance of ``1{Z >= 0}`` for ``Z ~ N(0, latent)`` with unit variances.

    Orthant probability: ``P(Z_i >= 0, Z_j >= 0) = 1/4 + asin(r) / (2 pi)``.
    """
    r = np.clip(latent, -1.0, 1.0)
    return np.arcsin(r) / (2 * np.pi)


def evaluation_covariance(cfg: ScenarioConfig) -> np.ndarray:
    S = covariance(cfg)
    return binary_covariance(S) if cfg.binary else S


def noise_variance(cfg: ScenarioConfig) -> float:
    b = np.asarray(cfg.beta_true)
    return float(b @ covariance(cfg) @ b)


def generate(cfg: ScenarioConfig, rng: np.random.Generator) -> tuple[Dataset, np.ndarray]:
    S = covariance(cfg)
    L = np.linalg.cholesky(S)
    X = rng.standard_normal((cfg.n, cfg.p)) @ L.T
    if cfg.binary:
        X = (X >= 0).astype(float)
    beta = np.asarray(cfg.beta_true)
    sigma = math.sqrt(noise_variance(cfg))
    y = X @ beta + sigma * rng.standard_normal(cfg.n)
    return Dataset(X, y), cfg.truth


def mcar_count(frac: float, n: int) -> int:
    # round first so 0.05 * 100 does not become 6 through representation error
    return int(math.ceil(round(frac * n, 9)))


def impose_missing(data: Dataset, spec: MissingSpec, rng: np.random.Generator) -> IncompleteDataset:
    n, p = data.n, data.p
    R = np.ones((n, p), dtype=np.int8)
    for c in spec.target_cols:
        j = c - 1
        if spec.mechanism == MCAR:
            k = mcar_count(spec.mcar_frac, n)
            if n - k < MIN_OBSERVED:
                raise ValueError(f"MCAR fraction leaves fewer than {MIN_OBSERVED} observed rows in column {c}")
            col = np.ones(n, dtype=np.int8)
            col[rng.choice(n, size=k, replace=False)] = 0
        else:
            eta = spec.alpha0 + spec.slopes[0] * data.X[:, j - 10] + spec.slopes[1] * data.y
            prob = expit(eta)
            for _ in range(MASK_RETRIES):
                col = (rng.random(n) >= prob).astype(np.int8)
                if col.sum() >= MIN_OBSERVED:
                    break
            else:
                raise ValueError(f"could not draw a mask leaving {MIN_OBSERVED} observed rows in column {c}")
        R[:, j] = col
    return IncompleteDataset.from_dataset(data, R)


@dataclass
class MetricsRow:
    arm: str
    SEN: float
    SPE: float
    F1: float
    MSE: float
    selected_count: int
    x_pct: float | None = None

    @property
    def distance(self) -> float:
        return distance(self.SEN, self.SPE)


def evaluate(selected, truth, beta_hat, beta_true, Sigma, arm: str = "") -> MetricsRow:
    selected = np.asarray(selected, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    sen, spe = sen_spe(selected, truth)
    hits = int(np.sum(selected & truth))
    n_sel = int(selected.sum())
    precision = hits / n_sel if n_sel else 0.0
    f1 = 2 * precision * sen / (precision + sen) if precision + sen > 0 else 0.0
    e = np.asarray(beta_hat, dtype=float) - np.asarray(beta_true, dtype=float)
    mse = float(max(e @ np.asarray(Sigma) @ e, 0.0))
    return MetricsRow(arm, sen, spe, f1, mse, n_sel)


def refit_pool(stack: ImputedStack, selected) -> tuple[np.ndarray, bool]:
    """OLS per imputation on the selected columns, averaged over imputations.

    Returns ``(beta, flagged)``; a singular design falls back to a 1e-8 ridge.
    """
    selected = np.asarray(selected, dtype=bool)
    if selected.sum() >= stack.n:
        raise ValueError("refit needs fewer selected covariates than rows")
    idx = np.flatnonzero(selected)
    beta = np.zeros(stack.p)
    flagged = False
    if idx.size == 0:
        return beta, flagged
    acc = np.zeros(idx.size)
    for ds in stack.datasets:
        A = np.column_stack([np.ones(ds.n), ds.X[:, idx]])
        G = A.T @ A
        if np.linalg.matrix_rank(G) < G.shape[0]:
            flagged = True
            coef = np.linalg.solve(G + 1e-8 * np.eye(G.shape[0]), A.T @ ds.y)
        else:
            coef = np.linalg.solve(G, A.T @ ds.y)
        acc += coef[1:]
    beta[idx] = acc / stack.D
    if flagged:
        warnings.warn("singular refit design; used a 1e-8 ridge", RuntimeWarning, stacklevel=2)
    return beta, flagged


# ---------------------------------------------------------------------------
# experiment loop


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig
    arms: tuple[str, ...] = DEFAULT_ARMS
    chain: ChainConfig = field(default_factory=lambda: ChainConfig(n_chains=2, burn_in=1000, kept=1000))
    mice: MiceConfig = field(default_factory=MiceConfig)
    hyperparams: dict = field(default_factory=dict)
    x_rule: str = "per_replication"

    def __post_init__(self):
        if self.x_rule not in X_RULES:
            raise ValueError(f"x_rule must be one of {X_RULES}")
        unknown = set(self.arms) - set(DEFAULT_ARMS) - set(OPTIONAL_ARMS)
        if unknown:
            raise ValueError(f"unknown arms {sorted(unknown)}")


@dataclass
class ReplicationResult:
    replication: int
    seed: int
    rows: dict[str, MetricsRow] = field(default_factory=dict)
    scans: dict[str, list[MetricsRow]] = field(default_factory=dict)
    complete_fraction: float = float("nan")
    rhat: dict[str, float] = field(default_factory=dict)
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "replication": self.replication,
            "seed": self.seed,
            "complete_fraction": self.complete_fraction,
            "error": self.error,
            "rhat": self.rhat,
            "rows": {k: asdict(v) for k, v in self.rows.items()},
            "scans": {k: [asdict(r) for r in v] for k, v in self.scans.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReplicationResult":
        return cls(
            d["replication"],
            d["seed"],
            {k: MetricsRow(**v) for k, v in d["rows"].items()},
            {k: [MetricsRow(**r) for r in v] for k, v in d["scans"].items()},
            d.get("complete_fraction", float("nan")),
            d.get("rhat", {}),
            d.get("error"),
        )


def _arm_seed(seed: int, arm: str) -> int:
    key = sum((i + 1) * ord(ch) for i, ch in enumerate(arm))
    return int(np.random.SeedSequence([seed & ((1 << 64) - 1), _S_MCMC, key]).generate_state(1, np.uint64)[0] >> 1)


def _bayes_rows(arm, kind, stack, cfg, exp, seed, truth, Sigma, res):
    model = ModelSpec(kind, exp.hyperparams.get(arm, exp.hyperparams.get(kind, {})))
    draws = fit(model, stack, replace(exp.chain, seed=_arm_seed(seed, arm)))
    res.rhat[arm] = draws.max_rhat
    beta_true = np.asarray(cfg.beta_true)
    if model.is_spike:
        sel = select_by_median_indicator(draws).selected
        beta_hat, _ = refit_pool(stack, sel)
        res.rows[arm] = evaluate(sel, truth, beta_hat, beta_true, Sigma, arm)
        return
    pooled = pool(draws)
    scan = []
    for row in scan_intervals(pooled, truth=truth):
        beta_hat, _ = refit_pool(stack, row.selected)
        m = evaluate(row.selected, truth, beta_hat, beta_true, Sigma, arm)
        m.x_pct = row.x_pct
        scan.append(m)
    res.scans[arm] = scan
    if arm == "BLASSO":
        # no truth at analysis time: pick x% by the modified BIC
        result, _ = choose_interval_by_bic(stack, draws)
        sel = result.selected
        beta_hat, _ = refit_pool(stack, sel)
        res.rows[arm] = evaluate(sel, truth, beta_hat, beta_true, Sigma, arm)
        res.rows[arm].x_pct = result.threshold
        del res.scans[arm]


def run_replication(exp: ExperimentConfig, r: int) -> ReplicationResult:
    cfg = exp.scenario
    seed = (cfg.seed + r) & ((1 << 64) - 1)
    res = ReplicationResult(r, seed)
    try:
        _run_replication(exp, seed, res)
    except Exception as err:  # recorded, aggregated later
        res.error = f"{type(err).__name__}: {err}"
    return res


def _run_replication(exp: ExperimentConfig, seed: int, res: ReplicationResult) -> None:
    cfg = exp.scenario
    full, truth = generate(cfg, make_rng(seed, _S_DATA))
    incomplete = impose_missing(full, cfg.missing, make_rng(seed, _S_MASK))
    res.complete_fraction = float(np.mean(np.all(incomplete.R == 1, axis=1)))
    Sigma = evaluation_covariance(cfg)
    beta_true = np.asarray(cfg.beta_true)
    needs_mi = any(a in BAYES_ARMS or a == "MI-LASSO" for a in exp.arms)
    if needs_mi:
        stack = impute(incomplete, replace(exp.mice, seed=int(make_rng(seed, _S_IMPUTE).integers(1 << 62))))
        std, _ = standardize(stack)
    full_stack = ImputedStack.from_arrays(full.X[None], full.y[None], full.column_names, full.column_kinds, "simulated")
    for arm in exp.arms:
        if arm in BAYES_ARMS:
            _bayes_rows(arm, BAYES_ARMS[arm], stack, cfg, exp, seed, truth, Sigma, res)
        elif arm in ("BLASSO", "BLASSO(CI)"):
            _bayes_rows(arm, "MultiLaplace", full_stack, cfg, exp, seed, truth, Sigma, res)
        elif arm == "MI-LASSO":
            best, _ = tune_milasso(std)
            sel = milasso_selection(std, best).selected
            beta_hat, _ = refit_pool(stack, sel)
            res.rows[arm] = evaluate(sel, truth, beta_hat, beta_true, Sigma, arm)
        elif arm in ("LASSO", "CC-LASSO"):
            data = full if arm == "LASSO" else incomplete.complete_cases()
            sel = _lasso_selection(data)
            one = ImputedStack.from_arrays(data.X[None], data.y[None])
            beta_hat, _ = refit_pool(one, sel)
            res.rows[arm] = evaluate(sel, truth, beta_hat, beta_true, Sigma, arm)


def _lasso_selection(data: Dataset) -> np.ndarray:
    sd = data.X.std(axis=0, ddof=1)
    keep = sd > 0
    Xs = np.zeros_like(data.X)
    Xs[:, keep] = (data.X[:, keep] - data.X[:, keep].mean(axis=0)) / sd[keep]
    beta, _, _, _ = tune_lasso(Dataset(Xs, data.y - data.y.mean()))
    return (beta != 0) & keep


@dataclass
class ArmSummary:
    arm: str
    means: dict[str, float]
    ses: dict[str, float]
    replications: int
    x_pct: float | None = None
    flags: list[str] = field(default_factory=list)


METRICS = ("SEN", "SPE", "F1", "MSE")


def _summarize(arm: str, rows: list[MetricsRow], x_pct=None) -> ArmSummary:
    R = len(rows)
    means, ses = {}, {}
    for m in METRICS:
        v = np.array([getattr(r, m) for r in rows])
        means[m] = float(v.mean())
        ses[m] = float(v.std(ddof=1) / math.sqrt(R)) if R > 1 else 0.0
    return ArmSummary(arm, means, ses, R, x_pct, [] if R > 1 else ["single_replication"])


def best_x(scans: list[list[MetricsRow]]) -> float:
    """x% maximizing the replication-averaged distance; ties go to the larger x%."""
    grid = [r.x_pct for r in scans[0]]
    avg = [np.mean([s[k].distance for s in scans]) for k in range(len(grid))]
    k = max(range(len(grid)), key=lambda i: (avg[i], grid[i]))
    return grid[k]


def best_row(scan: list[MetricsRow]) -> MetricsRow:
    """Distance-maximizing row of one replication's scan; ties go to the larger x%."""
    return max(scan, key=lambda m: (m.distance, m.x_pct))



def aggregate(results: list[ReplicationResult], arms, x_rule: str = "per_replication") -> list[ArmSummary]:
    """Per-arm means and standard errors over successful replications.

    Interval-rule arms report, per replication, the scan row with the largest
    distance (``x_rule="per_replication"``, the reported x% is the mean of the
    chosen values) or the row at the single x% maximizing the
    replication-averaged distance (``x_rule="averaged"``).
    """
    if x_rule not in X_RULES:
        raise ValueError(f"x_rule must be one of {X_RULES}")
    ok = [r for r in results if r.error is None]
    out = []
    for arm in arms:
        if ok and arm in ok[0].scans:
            scans = [r.scans[arm] for r in ok]
            if x_rule == "averaged":
                x = best_x(scans)
                k = [row.x_pct for row in scans[0]].index(x)
                out.append(_summarize(arm, [s[k] for s in scans], x))
            else:
                rows = [best_row(s) for s in scans]
                out.append(_summarize(arm, rows, float(np.mean([m.x_pct for m in rows]))))
        elif ok and arm in ok[0].rows:
            out.append(_summarize(arm, [r.rows[arm] for r in ok]))
    return out


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    replications: list[ReplicationResult]
    summary: list[ArmSummary]

    @property
    def failures(self) -> int:
        return sum(r.error is not None for r in self.replications)


def _worker(args):
    exp, r = args
    return run_replication(exp, r)


def run_experiment(exp: ExperimentConfig, threads: int = 1, progress=None) -> ExperimentResult:
    """Run every replication (``seed + r``) and aggregate per arm.

    Replications run in up to ``threads`` processes and are merged by index,
    so the result does not depend on ``threads``.  Failed replications are
    recorded; more than 10% failures raise.
    """
    R = exp.scenario.replications
    jobs = [(exp, r) for r in range(R)]
    if threads > 1 and R > 1:
        with ProcessPoolExecutor(max_workers=min(threads, R)) as pool_:
            results = list(pool_.map(_worker, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_worker(job))
            if progress:
                progress(results[-1])
    results.sort(key=lambda r: r.replication)
    failed = [r for r in results if r.error]
    if failed and len(failed) >= 0.1 * R:
        raise RuntimeError(f"{len(failed)}/{R} replications failed; first error: {failed[0].error}")
    for r in failed:
        warnings.warn(f"replication {r.replication} failed: {r.error}", RuntimeWarning, stacklevel=2)
    return ExperimentResult(exp, results, aggregate(results, exp.arms, exp.x_rule))
