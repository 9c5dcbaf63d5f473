"""Turning posterior draws into selected covariate sets.

Draws for covariate ``j`` are pooled across imputations (a mixture of the
``D`` per-dataset posteriors).  Shrinkage models keep ``j`` when the
equal-tailed ``x%`` interval of the pooled draws excludes zero; spike models
keep ``j`` when its inclusion indicator has posterior median 1.  The x% grid
is 5, 10, ..., 95 and is scored by the distance ``sqrt(SEN^2 + SPE^2)`` when
the truth is known, by the modified BIC otherwise.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import ImputedStack
from .sampling import PosteriorDraws

X_GRID = tuple(range(5, 100, 5))
MIN_POOLED = 200


@dataclass(frozen=True)
class PooledPosterior:
    """Per-covariate mixture of draws over imputations, chains and iterations.

    ``beta`` is ``(p, D * chains * draws)`` in d-major, chain-minor order.
    """

    beta: np.ndarray
    sigma2: np.ndarray
    column_names: tuple[str, ...]
    D: int
    gamma: np.ndarray | None = None

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    @property
    def size(self) -> int:
        return self.beta.shape[1]

    def mean(self) -> np.ndarray:
        return self.beta.mean(axis=1)


@dataclass
class SelectionResult:
    selected: np.ndarray
    rule: str
    threshold: float | None
    estimates: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    column_names: tuple[str, ...]
    bic: float | None = None
    flags: list[str] = field(default_factory=list)

    @property
    def n_selected(self) -> int:
        return int(np.sum(self.selected))

    def to_dict(self) -> dict:
        return {
            "rule": self.rule,
            "threshold": self.threshold,
            "bic": self.bic,
            "flags": list(self.flags),
            "covariates": [
                {
                    "name": name,
                    "selected": bool(self.selected[j]),
                    "estimate": float(self.estimates[j]),
                    "lo": float(self.lo[j]),
                    "hi": float(self.hi[j]),
                }
                for j, name in enumerate(self.column_names)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def pool(draws: PosteriorDraws, scale: str = "original") -> PooledPosterior:
    """Mix the per-imputation draws of each covariate into one sample."""
    if draws.beta.size == 0:
        raise ValueError("cannot pool empty draws")
    beta = draws.beta_original() if scale == "original" else draws.beta
    C, S, D, p = beta.shape
    flat = np.transpose(beta, (3, 2, 0, 1)).reshape(p, D * C * S)
    gamma = draws.aux.get("gamma")
    if gamma is not None:
        gamma = np.transpose(gamma, (2, 0, 1)).reshape(p, C * S)
    names = draws.column_names or tuple(f"X{j + 1}" for j in range(p))
    return PooledPosterior(flat, draws.sigma2.reshape(-1), names, D, gamma)


def interval(pooled: PooledPosterior, x_pct: float) -> tuple[np.ndarray, np.ndarray]:
    """Equal-tailed ``x_pct`` interval per covariate (type-7 quantiles)."""
    if not 0 < x_pct < 100:
        raise ValueError("x_pct must lie in (0, 100)")
    tail = (1.0 - x_pct / 100.0) / 2.0
    lo, hi = np.quantile(pooled.beta, [tail, 1.0 - tail], axis=1, method="linear")
    return lo, hi


def select_by_interval(pooled: PooledPosterior, x_pct: float) -> SelectionResult:
    if pooled.size < MIN_POOLED:
        raise ValueError(f"interval rule needs at least {MIN_POOLED} pooled draws, got {pooled.size}")
    lo, hi = interval(pooled, x_pct)
    return SelectionResult(
        selected=(lo > 0) | (hi < 0),
        rule=f"credible_interval({x_pct:g}%)",
        threshold=float(x_pct),
        estimates=pooled.mean(),
        lo=lo,
        hi=hi,
        column_names=pooled.column_names,
    )


def sen_spe(selected, truth) -> tuple[float, float]:
    """Sensitivity and specificity; an empty denominator scores 1 by convention."""
    selected = np.asarray(selected, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    n_pos, n_neg = truth.sum(), (~truth).sum()
    sen = float((selected & truth).sum() / n_pos) if n_pos else 1.0
    spe = float((~selected & ~truth).sum() / n_neg) if n_neg else 1.0
    return sen, spe


def distance(sen: float, spe: float) -> float:
    return math.sqrt(sen * sen + spe * spe)


@dataclass
class ScanRow:
    x_pct: float
    selected: np.ndarray
    sen: float | None = None
    spe: float | None = None
    distance: float | None = None
    bic: float | None = None
    best: bool = False


def scan_intervals(pooled: PooledPosterior, truth=None, bic_fn=None, grid=X_GRID) -> list[ScanRow]:
    """Apply the interval rule over the x% grid.

    With ``truth`` each row carries SEN, SPE and distance and the
    distance-maximizing row is marked ``best``.  Without truth, ``bic_fn``
    (selected mask -> BIC) scores the rows and the BIC-minimizing row is
    marked.  Ties go to the larger x% (the sparser model).
    """
    if truth is None and bic_fn is None:
        raise ValueError("scan_intervals needs truth or a bic_fn")
    rows = []
    tails = []
    for x in grid:
        t = (1.0 - x / 100.0) / 2.0
        tails += [t, 1.0 - t]
    q = np.quantile(pooled.beta, tails, axis=1, method="linear")
    for k, x in enumerate(grid):
        lo, hi = q[2 * k], q[2 * k + 1]
        sel = (lo > 0) | (hi < 0)
        row = ScanRow(float(x), sel)
        if truth is not None:
            row.sen, row.spe = sen_spe(sel, truth)
            row.distance = distance(row.sen, row.spe)
        if bic_fn is not None:
            row.bic = float(bic_fn(sel))
        rows.append(row)
    if truth is not None:
        score = [r.distance for r in rows]
        best = max(range(len(rows)), key=lambda i: (score[i], rows[i].x_pct))
    else:
        best = min(range(len(rows)), key=lambda i: (rows[i].bic, -rows[i].x_pct))
    rows[best].best = True
    return rows


def select_by_median_indicator(draws: PosteriorDraws) -> SelectionResult:
    """Keep ``j`` iff the posterior inclusion proportion of ``gamma_j`` exceeds 0.5."""
    gamma = draws.aux.get("gamma")
    if gamma is None:
        raise ValueError(f"median-indicator rule needs a spike-and-slab model, got {draws.model}")
    incl = gamma.reshape(-1, draws.p).mean(axis=0)
    pooled = pool(draws)
    lo, hi = np.quantile(pooled.beta, [0.025, 0.975], axis=1, method="linear")
    return SelectionResult(
        selected=incl > 0.5,
        rule="median_indicator",
        threshold=0.5,
        estimates=pooled.mean(),
        lo=lo,
        hi=hi,
        column_names=pooled.column_names,
    )


def inclusion_probabilities(draws: PosteriorDraws) -> np.ndarray:
    gamma = draws.aux.get("gamma")
    if gamma is None:
        raise ValueError("draws carry no inclusion indicators")
    return gamma.reshape(-1, draws.p).mean(axis=0)


# ---------------------------------------------------------------------------
# modified BIC


def ols_per_dataset(stack: ImputedStack, columns=None, ridge: float = 0.0):
    """OLS with intercept on each imputed dataset.

    Returns ``(intercepts (D,), slopes (D, p), flagged)``; slopes outside
    ``columns`` are zero.  A rank-deficient design is solved with a
    ``ridge`` (default 1e-8 fallback) and ``flagged`` is set.
    """
    X, Y = stack.X, stack.Y
    D, n, p = X.shape
    cols = np.arange(p) if columns is None else np.flatnonzero(np.asarray(columns, dtype=bool)) if np.asarray(columns).dtype == bool else np.asarray(columns, dtype=int)
    slopes = np.zeros((D, p))
    intercepts = np.empty(D)
    flagged = False
    for d in range(D):
        xm = X[d].mean(axis=0)
        ym = Y[d].mean()
        if cols.size == 0:
            intercepts[d] = ym
            continue
        Xc = X[d][:, cols] - xm[cols]
        yc = Y[d] - ym
        G = Xc.T @ Xc
        rank = np.linalg.matrix_rank(G)
        if rank < cols.size or ridge > 0:
            flagged = flagged or rank < cols.size
            lam = ridge if ridge > 0 else 1e-8
            b = np.linalg.solve(G + lam * np.eye(cols.size), Xc.T @ yc)
        else:
            b = np.linalg.solve(G, Xc.T @ yc)
        slopes[d, cols] = b
        intercepts[d] = ym - xm[cols] @ b
    return intercepts, slopes, flagged


def degrees_of_freedom(beta_bar, beta_ols) -> float:
    """Group-norm df estimate: active groups plus shrinkage ratios times ``D - 1``."""
    beta_bar = np.asarray(beta_bar, dtype=float)
    D = beta_bar.shape[0]
    nb = np.sqrt(np.sum(beta_bar**2, axis=0))
    active = nb > 0
    if beta_ols is None:
        return float(active.sum() * D)
    no = np.sqrt(np.sum(np.asarray(beta_ols, dtype=float) ** 2, axis=0))
    ratio = np.divide(nb, no, out=np.where(active, 1.0, 0.0), where=no > 0)
    return float(active.sum() + np.sum(ratio) * (D - 1))


def modified_bic(stack: ImputedStack, beta_bar, beta_ols=None, intercepts=None, ols="auto") -> float:
    """Modified BIC for grouped selection across ``D`` imputations.

    ``log(RSS / (D n)) + df * log(D n) / (D n)`` with ``df`` from
    :func:`degrees_of_freedom`.  ``beta_bar`` is ``(D, p)``.  When
    ``beta_ols`` is omitted it is computed per dataset if ``n > p + 1``;
    otherwise ``df`` falls back to the active-group count times ``D``.
    ``intercepts`` default to ``mean(y_d) - mean(X_d) @ beta_bar_d``.
    Returns ``-inf`` (with a warning) for a zero residual sum.
    """
    X, Y = stack.X, stack.Y
    D, n, p = X.shape
    beta_bar = np.asarray(beta_bar, dtype=float).reshape(D, p)
    if intercepts is None:
        intercepts = Y.mean(axis=1) - np.einsum("dp,dp->d", X.mean(axis=1), beta_bar)
    resid = Y - intercepts[:, None] - np.einsum("dnp,dp->dn", X, beta_bar)
    rss = float(np.sum(resid * resid))
    if beta_ols is None and ols == "auto" and n > p + 1:
        beta_ols = ols_per_dataset(stack)[1]
    df = degrees_of_freedom(beta_bar, beta_ols)
    N = D * n
    if rss <= 0:
        warnings.warn("zero residual sum of squares in modified BIC", RuntimeWarning, stacklevel=2)
        return -math.inf
    return math.log(rss / N) + df * math.log(N) / N


def bic_for_selection(stack: ImputedStack, draws: PosteriorDraws | None, selected, mode: str = "posterior_mean", beta_ols=None) -> float:
    """Score a selected set with the modified BIC on the original scale.

    ``mode="posterior_mean"`` uses per-imputation posterior means of the
    selected coefficients (spike models: means over draws where the group is
    active); ``mode="refit"`` refits OLS per imputation on the selected set.
    """
    selected = np.asarray(selected, dtype=bool)
    if beta_ols is None and stack.n > stack.p + 1:
        beta_ols = ols_per_dataset(stack)[1]
    if mode == "refit":
        intercepts, slopes, _ = ols_per_dataset(stack, selected)
        return modified_bic(stack, slopes, beta_ols, intercepts, ols=None)
    if mode != "posterior_mean":
        raise ValueError(f"unknown BIC mode {mode!r}")
    if draws is None:
        raise ValueError("posterior_mean mode needs draws")
    beta_bar = posterior_means_by_dataset(draws)
    beta_bar = np.where(selected[None, :], beta_bar, 0.0)
    return modified_bic(stack, beta_bar, beta_ols, ols=None)


def posterior_means_by_dataset(draws: PosteriorDraws) -> np.ndarray:
    """``(D, p)`` posterior means on the original scale (conditional on inclusion for spike models)."""
    b = draws.beta_original()
    gamma = draws.aux.get("gamma")
    if gamma is None:
        return b.mean(axis=(0, 1))
    active = gamma[:, :, None, :] == 1
    count = active.sum(axis=(0, 1))
    total = np.where(active, b, 0.0).sum(axis=(0, 1))
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def choose_interval_by_bic(stack: ImputedStack, draws: PosteriorDraws, mode: str = "posterior_mean") -> tuple[SelectionResult, list[ScanRow]]:
    """Scan the x% grid without truth and keep the BIC-minimizing interval."""
    pooled = pool(draws)
    beta_ols = ols_per_dataset(stack)[1] if stack.n > stack.p + 1 else None
    rows = scan_intervals(pooled, bic_fn=lambda sel: bic_for_selection(stack, draws, sel, mode, beta_ols))
    best = next(r for r in rows if r.best)
    result = select_by_interval(pooled, best.x_pct)
    result.bic = best.bic
    return result, rows
