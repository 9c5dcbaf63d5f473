"""Frequentist comparators: MI-LASSO (grouped across imputations) and LASSO.

MI-LASSO minimizes ``sum_d ||y_d - X_d b_d||^2 + lam * sum_j ||b_{.,j}||_2``
where ``b_{.,j}`` stacks the j-th coefficient over the ``D`` imputations.  It
is solved by iterated ridge majorization: the penalty ``||b_j||`` is bounded
above by ``||b_j||^2 / (2 ||b_j^t||) + ||b_j^t|| / 2``, so every iteration is
a ridge solve per dataset and the objective never increases.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .data import Dataset, ImputedStack
from .selection import SelectionResult, modified_bic, ols_per_dataset

EPS = 1e-10
ZERO_NORM = 1e-6
TOL = 1e-6
MAX_ITER = 500
KKT_TOL = 1e-4
POLISH_TOL = 1e-6


@dataclass
class GroupLassoFit:
    beta: np.ndarray
    intercepts: np.ndarray
    lam: float
    iterations: int
    converged: bool
    objective_path: list[float] = field(default_factory=list)

    @property
    def group_norms(self) -> np.ndarray:
        return np.sqrt(np.sum(self.beta**2, axis=0))

    @property
    def selected(self) -> np.ndarray:
        return self.group_norms > 0


def _centered(stack: ImputedStack):
    X, Y = stack.X, stack.Y
    xm = X.mean(axis=1)
    ym = Y.mean(axis=1)
    return X - xm[:, None, :], Y - ym[:, None], xm, ym


def objective(Xc, Yc, beta, lam) -> float:
    r = Yc - np.einsum("dnp,dp->dn", Xc, beta)
    return float(np.sum(r * r) + lam * np.sum(np.sqrt(np.sum(beta**2, axis=0))))


def stacked_gradient(Xc, Yc, beta) -> np.ndarray:
    """``2 X_d^T r_d`` per dataset, shape ``(D, p)``; column j is the group gradient."""
    r = Yc - np.einsum("dnp,dp->dn", Xc, beta)
    return 2.0 * np.einsum("dnp,dn->dp", Xc, r)


def lambda_max(stack: ImputedStack) -> float:
    """Smallest penalty at which every group is zero."""
    Xc, Yc, _, _ = _centered(stack)
    g = stacked_gradient(Xc, Yc, np.zeros((stack.D, stack.p)))
    return float(np.max(np.sqrt(np.sum(g**2, axis=0))))


def kkt_violation(stack: ImputedStack, fit: GroupLassoFit) -> float:
    """Largest deviation from the group-lasso optimality conditions."""
    Xc, Yc, _, _ = _centered(stack)
    g = stacked_gradient(Xc, Yc, fit.beta)
    norms = fit.group_norms
    gn = np.sqrt(np.sum(g**2, axis=0))
    worst = 0.0
    for j in range(stack.p):
        if norms[j] > 0:
            dev = np.sqrt(np.sum((g[:, j] - fit.lam * fit.beta[:, j] / norms[j]) ** 2))
        else:
            dev = max(gn[j] - fit.lam, 0.0)
        worst = max(worst, float(dev))
    return worst


def fit_milasso(stack: ImputedStack, lam: float, init=None, tol: float = TOL, max_iter: int = MAX_ITER) -> GroupLassoFit:
    """Group-lasso fit across imputations at penalty ``lam``.

    ``init`` is an optional ``(D, p)`` warm start.  Groups whose norm drops
    below 1e-6 are set to zero; at convergence any zero group that violates
    its KKT condition is re-seeded along its gradient and iteration resumes.
    Non-convergence returns the last iterate with ``converged=False``.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    Xc, Yc, xm, ym = _centered(stack)
    D, n, p = Xc.shape
    G = np.einsum("dni,dnj->dij", Xc, Xc)
    b = np.einsum("dnp,dn->dp", Xc, Yc)

    def finish(beta, it, ok, path):
        return GroupLassoFit(beta, ym - np.einsum("dp,dp->d", xm, beta), float(lam), it, ok, path)

    if lam == 0:
        beta = np.linalg.solve(G, b[..., None])[..., 0]
        return finish(beta, 1, True, [objective(Xc, Yc, beta, 0.0)])

    if init is None:
        beta = np.linalg.solve(G + lam * np.eye(p), b[..., None])[..., 0]
    else:
        beta = np.array(init, dtype=float).reshape(D, p)
    path = [objective(Xc, Yc, beta, lam)]
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        norms = np.sqrt(np.sum(beta**2, axis=0))
        active = norms > 0
        new = np.zeros_like(beta)
        if active.any():
            idx = np.flatnonzero(active)
            A = G[:, idx[:, None], idx[None, :]].copy()
            A[:, np.arange(idx.size), np.arange(idx.size)] += lam / (2.0 * norms[idx] + EPS)
            new[:, idx] = np.linalg.solve(A, b[:, idx, None])[..., 0]
        new[:, np.sqrt(np.sum(new**2, axis=0)) < ZERO_NORM] = 0.0
        _drop_dominated(G, b, new, lam)
        change = float(np.max(np.abs(new - beta)))
        beta = new
        path.append(objective(Xc, Yc, beta, lam))
        if change < tol:
            if _reseed(Xc, Yc, G, beta, lam):
                path.append(objective(Xc, Yc, beta, lam))
                continue
            converged = True
            break
    if _kkt(G, b, beta, lam) > POLISH_TOL:
        # the majorization stalls near the zero boundary; finish with exact block steps
        converged = _polish(G, b, beta, lam, path, Xc, Yc)
    return finish(beta, it, converged, path)


def _kkt(G, b, beta, lam) -> float:
    g = 2.0 * (b - np.einsum("dij,dj->di", G, beta))
    norms = np.sqrt(np.sum(beta**2, axis=0))
    gn = np.sqrt(np.sum(g**2, axis=0))
    active = norms > 0
    dev = np.where(active, 0.0, np.maximum(gn - lam, 0.0))
    if active.any():
        u = beta[:, active] / norms[active]
        dev[active] = np.sqrt(np.sum((g[:, active] - lam * u) ** 2, axis=0))
    return float(dev.max())


def _block_minimizer(a, c, lam) -> np.ndarray:
    """Minimize ``sum_d (a_d x_d^2 - 2 c_d x_d) + lam ||x||`` exactly."""
    cn = np.sqrt(np.sum(c**2))
    if 2.0 * cn <= lam:
        return np.zeros_like(c)
    if lam == 0:
        return c / a
    # the solution has x_d = 2 t c_d / (2 a_d t + lam) with ||x|| = t
    f = lambda t: np.sum(4.0 * c**2 / (2.0 * a * t + lam) ** 2) - 1.0
    t = brentq(f, 0.0, cn / a.min(), xtol=1e-15, rtol=1e-15)
    return 2.0 * t * c / (2.0 * a * t + lam)


def _polish(G, b, beta, lam, path, Xc, Yc, max_sweeps: int = 2000) -> bool:
    """Exact block coordinate sweeps until the KKT residual is negligible (in place)."""
    D, p = beta.shape
    Gb = np.einsum("dij,dj->di", G, beta)
    for _ in range(max_sweeps):
        for j in range(p):
            a = G[:, j, j]
            c = b[:, j] - Gb[:, j] + a * beta[:, j]
            new = _block_minimizer(a, c, lam)
            delta = new - beta[:, j]
            if np.any(delta != 0):
                Gb += G[:, :, j] * delta[:, None]
                beta[:, j] = new
        path.append(objective(Xc, Yc, beta, lam))
        if _kkt(G, b, beta, lam) <= POLISH_TOL:
            return True
    return False


def _drop_dominated(G, b, beta, lam) -> None:
    """Zero each group whose exact block minimizer, others held fixed, is zero (in place)."""
    for j in np.flatnonzero(np.any(beta != 0, axis=0)):
        resid_grad = b[:, j] - np.einsum("dk,dk->d", G[:, j, :], beta) + G[:, j, j] * beta[:, j]
        if 2.0 * np.sqrt(np.sum(resid_grad**2)) <= lam:
            beta[:, j] = 0.0


def _reseed(Xc, Yc, G, beta, lam) -> bool:
    """Re-open zero groups whose gradient norm exceeds ``lam`` (in place)."""
    g = stacked_gradient(Xc, Yc, beta)
    gn = np.sqrt(np.sum(g**2, axis=0))
    zero = np.sqrt(np.sum(beta**2, axis=0)) == 0
    bad = np.flatnonzero(zero & (gn > lam * (1 + 1e-9)))
    for j in bad:
        curv = float(np.max(G[:, j, j]))
        step = min(1e-3, (gn[j] - lam) / (2.0 * curv)) if curv > 0 else 1e-3
        step = max(step, 10 * ZERO_NORM)
        beta[:, j] = step * g[:, j] / gn[j]
    return bad.size > 0


def default_lambda_grid(stack: ImputedStack, size: int = 50, ratio: float = 1e-3) -> np.ndarray:
    lmax = lambda_max(stack)
    return np.geomspace(lmax, lmax * ratio, size)


@dataclass
class PathPoint:
    lam: float
    bic: float
    fit: GroupLassoFit


def tune_milasso(stack: ImputedStack, lambda_grid=None) -> tuple[GroupLassoFit, list[PathPoint]]:
    """Fit a warm-started path from the largest penalty down; keep the BIC minimizer.

    Ties go to the larger penalty.
    """
    grid = default_lambda_grid(stack) if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
    if grid.size == 0:
        raise ValueError("lambda grid is empty")
    grid = np.sort(grid)[::-1]
    beta_ols = ols_per_dataset(stack)[1] if stack.n > stack.p + 1 else None
    path = []
    warm = None
    for lam in grid:
        fit = fit_milasso(stack, float(lam), init=warm)
        if not fit.converged:
            warnings.warn(f"MI-LASSO did not converge at lambda={lam:.4g}", RuntimeWarning, stacklevel=2)
        warm = fit.beta if fit.selected.any() else None
        bic = modified_bic(stack, fit.beta, beta_ols, fit.intercepts, ols=None)
        path.append(PathPoint(float(lam), bic, fit))
    best = min(range(len(path)), key=lambda i: (path[i].bic, -path[i].lam))
    return path[best].fit, path


def milasso_selection(stack: ImputedStack, fit: GroupLassoFit, bic: float | None = None) -> SelectionResult:
    pooled = fit.beta.mean(axis=0)
    return SelectionResult(
        selected=fit.selected,
        rule=f"bic_path({fit.lam:.6g})",
        threshold=fit.lam,
        estimates=pooled,
        lo=fit.beta.min(axis=0),
        hi=fit.beta.max(axis=0),
        column_names=stack.column_names,
        bic=bic,
        flags=[] if fit.converged else ["not_converged"],
    )


# ---------------------------------------------------------------------------
# plain lasso


def _soft(z, t):
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def fit_lasso(data, lam: float, y=None, tol: float = 1e-12, max_iter: int = 100000) -> np.ndarray:
    """Coordinate descent for ``0.5 ||y - X b||^2 + lam ||b||_1`` on centered data.

    ``data`` is a :class:`Dataset` or a design matrix with ``y`` given.
    """
    if isinstance(data, Dataset):
        X, y = data.X, data.y
    else:
        X = np.asarray(data, dtype=float)
        y = np.asarray(y, dtype=float)
    Xc = X - X.mean(axis=0)
    r = y - y.mean()
    n, p = Xc.shape
    sq = np.sum(Xc**2, axis=0)
    beta = np.zeros(p)
    for _ in range(max_iter):
        delta = 0.0
        for j in range(p):
            if sq[j] == 0:
                continue
            old = beta[j]
            z = Xc[:, j] @ r + sq[j] * old
            new = _soft(z, lam) / sq[j]
            if new != old:
                r -= Xc[:, j] * (new - old)
                beta[j] = new
                delta = max(delta, abs(new - old))
        if delta < tol:
            break
    return beta


def lasso_intercept(X, y, beta) -> float:
    return float(np.mean(y) - np.mean(X, axis=0) @ beta)


def tune_lasso(data: Dataset, lambda_grid=None, size: int = 50, ratio: float = 1e-3):
    """LASSO with the penalty chosen by the modified BIC at ``D = 1``.

    Returns ``(beta, intercept, lam, path)`` where ``path`` lists ``(lam, bic)``.
    """
    X, y = data.X, data.y
    stack = ImputedStack.from_arrays(X[None], y[None], data.column_names, data.column_kinds)
    if lambda_grid is None:
        lmax = float(np.max(np.abs((X - X.mean(axis=0)).T @ (y - y.mean()))))
        grid = np.geomspace(lmax, lmax * ratio, size)
    else:
        grid = np.sort(np.asarray(lambda_grid, dtype=float))[::-1]
    path = []
    best = None
    for lam in grid:
        beta = fit_lasso(X, lam, y=y)
        bic = modified_bic(stack, beta[None], None, np.array([lasso_intercept(X, y, beta)]), ols=None)
        path.append((float(lam), bic))
        if best is None or bic < best[0]:
            best = (bic, beta, float(lam))
    _, beta, lam = best
    return beta, lasso_intercept(X, y, beta), lam, path
