"""Multiple imputation by chained equations.

Continuous columns use predictive mean matching: coefficients are drawn from
the Bayesian linear-regression posterior, each missing row is matched to the
``pmm_donors`` observed rows with the nearest predicted means (computed at
the least-squares fit) and receives the observed value of one of them at
random.  Binary columns use a logistic regression at its posterior mode,
perturbed by a draw from the Laplace approximation, followed by a Bernoulli
draw.  Every column is regressed on all other columns plus ``y``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import BINARY, Dataset, ImputedStack, IncompleteDataset
from .sampling import make_rng

MIN_OBSERVED = 5
LOGISTIC_RIDGE = 1e-4
LINEAR_RIDGE = 1e-5


@dataclass(frozen=True)
class MiceConfig:
    D: int = 5
    cycles: int = 10
    pmm_donors: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.D < 1 or self.cycles < 1 or self.pmm_donors < 1:
            raise ValueError("D, cycles and pmm_donors must all be >= 1")


@dataclass
class ImputationFlags:
    ridge_logistic: list[tuple[int, int, str]] = field(default_factory=list)

    @property
    def any(self) -> bool:
        return bool(self.ridge_logistic)


def _design(Xcur: np.ndarray, y: np.ndarray, j: int) -> np.ndarray:
    others = np.delete(Xcur, j, axis=1)
    return np.column_stack([np.ones(len(y)), others, y])


def draw_linear(A_obs: np.ndarray, t_obs: np.ndarray, rng: np.random.Generator):
    """Least-squares fit and one posterior draw under a flat prior.

    Returns ``(beta_hat, beta_draw)``.
    """
    n, k = A_obs.shape
    G = A_obs.T @ A_obs
    G[np.diag_indices(k)] += LINEAR_RIDGE * np.maximum(np.diag(G), 1.0)
    L = np.linalg.cholesky(G)
    beta_hat = np.linalg.solve(G, A_obs.T @ t_obs)
    resid = t_obs - A_obs @ beta_hat
    dof = max(n - k, 1)
    sigma = np.sqrt(np.sum(resid**2) / rng.chisquare(dof))
    z = rng.standard_normal(k)
    # cov(beta) = sigma^2 G^{-1} = sigma^2 L^{-T} L^{-1}
    beta_draw = beta_hat + sigma * np.linalg.solve(L.T, z)
    return beta_hat, beta_draw


def pmm(yhat_obs: np.ndarray, yhat_mis: np.ndarray, donors_values: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Predictive mean matching; distance ties resolve toward the lower row index."""
    k = min(k, yhat_obs.size)
    out = np.empty(yhat_mis.size)
    for i, target in enumerate(yhat_mis):
        dist = np.abs(yhat_obs - target)
        nearest = np.argsort(dist, kind="stable")[:k]
        out[i] = donors_values[nearest[rng.integers(k)]]
    return out


def fit_logistic(A: np.ndarray, t: np.ndarray, ridge: float = 0.0, max_iter: int = 100):
    """Newton-Raphson posterior mode; returns ``(beta, hessian, ok)``."""
    k = A.shape[1]
    beta = np.zeros(k)
    pen = ridge * np.eye(k)
    if k:
        pen[0, 0] = 0.0
    H = None
    for _ in range(max_iter):
        mu = expit(A @ beta)
        w = mu * (1 - mu)
        grad = A.T @ (t - mu) - pen @ beta
        H = (A * w[:, None]).T @ A + pen
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            return beta, H, False
        beta = beta + step
        if not np.all(np.isfinite(beta)):
            return beta, H, False
        if np.max(np.abs(step)) < 1e-8:
            mu = expit(A @ beta)
            H = (A * (mu * (1 - mu))[:, None]).T @ A + pen
            return beta, H, True
    return beta, H, False


def _separated(beta, H) -> bool:
    if H is None or not np.all(np.isfinite(beta)) or np.max(np.abs(beta)) > 20:
        return True
    return np.linalg.cond(H) > 1e12


def draw_logistic(A_obs, t_obs, rng, flags: ImputationFlags | None = None, tag=None):
    beta, H, ok = fit_logistic(A_obs, t_obs)
    if not ok or _separated(beta, H):
        beta, H, ok = fit_logistic(A_obs, t_obs, ridge=LOGISTIC_RIDGE)
        if flags is not None and tag is not None:
            flags.ridge_logistic.append(tag)
        if not ok or not np.all(np.isfinite(H)):
            raise np.linalg.LinAlgError("logistic imputation model failed even with ridge")
    cov = np.linalg.inv(H)
    cov = 0.5 * (cov + cov.T)
    L = np.linalg.cholesky(cov + 1e-12 * np.eye(len(beta)))
    return beta + L @ rng.standard_normal(len(beta))


def _impute_once(data: IncompleteDataset, cfg: MiceConfig, d: int, flags: ImputationFlags) -> np.ndarray:
    rng = make_rng(cfg.seed, d)
    X = np.array(data.X, dtype=float)
    miss = data.R == 0
    counts = miss.sum(axis=0)
    order = [int(j) for j in np.argsort(counts, kind="stable") if counts[j] > 0]
    for j in order:
        obs = X[~miss[:, j], j]
        if data.column_kinds[j] == BINARY:
            X[miss[:, j], j] = float(obs.mean() >= 0.5)
        else:
            X[miss[:, j], j] = obs.mean()
    for cycle in range(cfg.cycles):
        for j in order:
            m = miss[:, j]
            A = _design(X, data.y, j)
            t = X[~m, j]
            if data.column_kinds[j] == BINARY:
                beta = draw_logistic(A[~m], t, rng, flags, (d, j, data.column_names[j]))
                X[m, j] = (rng.random(int(m.sum())) < expit(A[m] @ beta)).astype(float)
            else:
                beta_hat, beta_draw = draw_linear(A[~m], t, rng)
                X[m, j] = pmm(A[~m] @ beta_hat, A[m] @ beta_draw, t, cfg.pmm_donors, rng)
    return X


def impute(data: IncompleteDataset, cfg: MiceConfig | None = None, return_flags: bool = False):
    """Produce ``cfg.D`` completed datasets; observed cells are never altered."""
    cfg = cfg or MiceConfig()
    miss = data.R == 0
    n_obs = (~miss).sum(axis=0)
    for j in np.flatnonzero(miss.any(axis=0)):
        if n_obs[j] < MIN_OBSERVED:
            raise ValueError(f"column {data.column_names[j]!r} has {n_obs[j]} observed rows; at least {MIN_OBSERVED} needed")
    flags = ImputationFlags()
    datasets = []
    for d in range(cfg.D):
        X = _impute_once(data, cfg, d, flags) if miss.any() else np.array(data.X, dtype=float)
        datasets.append(Dataset(X, data.y, data.column_names, data.column_kinds))
    if flags.any:
        warnings.warn(f"logistic imputation needed ridge stabilization {len(flags.ridge_logistic)} times", RuntimeWarning, stacklevel=2)
    stack = ImputedStack(tuple(datasets), "imputed")
    return (stack, flags) if return_flags else stack
