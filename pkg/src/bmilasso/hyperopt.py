"""Gaussian-process Bayesian optimization of spike-and-slab hyperparameters.

Candidates live in the unit cube (log-scaled where the search space says
so).  Three scrambled Sobol points seed a Matern-5/2 Gaussian process whose
expected improvement is maximized by multi-start L-BFGS-B.  The objective is
the modified BIC of the model fitted and selected at that candidate, with a
fixed MCMC seed so repeated evaluations agree.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm, qmc
from sklearn.exceptions import ConvergenceWarning
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import ConstantKernel, Matern

from .data import ImputedStack
from .sampling import ChainConfig, make_rng

N_INITIAL = 3
NOISE = 1e-6
N_STARTS = 10


@dataclass(frozen=True)
class Dimension:
    name: str
    lower: float
    upper: float
    scale: str = "linear"

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"{self.name}: lower must be below upper")
        if self.scale not in ("linear", "log"):
            raise ValueError(f"{self.name}: scale must be 'linear' or 'log'")
        if self.scale == "log" and self.lower <= 0:
            raise ValueError(f"{self.name}: log scale needs a positive lower bound")

    def from_unit(self, u: float) -> float:
        u = min(max(u, 0.0), 1.0)
        if self.scale == "log":
            return math.exp(math.log(self.lower) + u * (math.log(self.upper) - math.log(self.lower)))
        return self.lower + u * (self.upper - self.lower)

    def to_unit(self, v: float) -> float:
        if self.scale == "log":
            return (math.log(v) - math.log(self.lower)) / (math.log(self.upper) - math.log(self.lower))
        return (v - self.lower) / (self.upper - self.lower)


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple[Dimension, ...]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.dims)

    def point(self, u) -> dict[str, float]:
        return {d.name: d.from_unit(float(x)) for d, x in zip(self.dims, u)}


SPIKE_NORMAL_SPACE = SearchSpace((Dimension("v0", 0.01, 1000.0, "log"), Dimension("p0", 0.01, 0.99, "linear")))
SPIKE_LAPLACE_SPACE = SearchSpace(
    (
        Dimension("lambda", 0.01, 100.0, "log"),
        Dimension("a", 0.1, 1000.0, "log"),
        Dimension("b", 0.1, 1000.0, "log"),
    )
)
SPACES = {"SpikeNormal": SPIKE_NORMAL_SPACE, "SpikeLaplace": SPIKE_LAPLACE_SPACE}


def ei(mean, sd, best):
    """Expected improvement below ``best`` for a Gaussian prediction."""
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    gain = best - mean
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, gain / np.where(sd > 0, sd, 1.0), 0.0)
        out = np.where(sd > 0, gain * norm.cdf(z) + sd * norm.pdf(z), np.maximum(gain, 0.0))
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass
class BoTrace:
    points: list[dict[str, float]] = field(default_factory=list)
    values: list[float] = field(default_factory=list)

    @property
    def best_so_far(self) -> list[float]:
        return list(np.minimum.accumulate(self.values)) if self.values else []

    @property
    def best_index(self) -> int:
        return int(np.argmin(self.values))

    def write_csv(self, path) -> None:
        path = Path(path)
        names = list(self.points[0]) if self.points else []
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", *names, "bic", "best_so_far"])
            for k, (pt, v, b) in enumerate(zip(self.points, self.values, self.best_so_far), start=1):
                w.writerow([k, *(f"{pt[n]:.17g}" for n in names), f"{v:.17g}", f"{b:.17g}"])


def _surrogate_targets(values: np.ndarray) -> np.ndarray:
    finite = np.isfinite(values)
    if not finite.any():
        return np.zeros_like(values)
    hi, lo = values[finite].max(), values[finite].min()
    return np.where(finite, values, hi + max(hi - lo, 1.0))


def fit_gp(U: np.ndarray, y: np.ndarray, seed: int) -> GaussianProcessRegressor:
    kernel = ConstantKernel(1.0, (1e-3, 1e3)) * Matern(length_scale=np.full(U.shape[1], 0.5), length_scale_bounds=(1e-2, 1e2), nu=2.5)
    gp = GaussianProcessRegressor(kernel, alpha=NOISE, normalize_y=True, n_restarts_optimizer=3, random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        gp.fit(U, y)
    return gp


def propose(gp: GaussianProcessRegressor, best: float, dim: int, rng: np.random.Generator, anchors=()) -> np.ndarray:
    """Maximize expected improvement over the unit cube from several starts."""

    def neg_ei(u):
        m, s = gp.predict(u.reshape(1, -1), return_std=True)
        return -ei(m[0], s[0], best)

    starts = [*anchors, *rng.random((N_STARTS, dim))]
    best_u, best_val = None, math.inf
    for u0 in starts:
        res = minimize(neg_ei, np.clip(u0, 0, 1), method="L-BFGS-B", bounds=[(0.0, 1.0)] * dim)
        if res.fun < best_val:
            best_u, best_val = res.x, res.fun
    return np.clip(best_u, 0.0, 1.0)


def optimize(space: SearchSpace, evaluator, budget: int = 20, seed: int = 0, callback=None) -> tuple[dict[str, float], BoTrace]:
    """Minimize ``evaluator(point)`` over ``space`` in ``budget`` evaluations.

    A failing evaluation is recorded as ``+inf`` and the search continues.
    """
    if budget < N_INITIAL:
        raise ValueError(f"budget must be at least {N_INITIAL}")
    dim = len(space.dims)
    rng = make_rng(seed, 0)
    sobol = qmc.Sobol(dim, scramble=True, seed=make_rng(seed, 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        U = list(sobol.random(N_INITIAL))
    trace = BoTrace()

    def evaluate(u):
        pt = space.point(u)
        try:
            v = float(evaluator(pt))
            if math.isnan(v):
                v = math.inf
        except Exception as err:  # the point is recorded as infeasible
            warnings.warn(f"evaluation failed at {pt}: {err}", RuntimeWarning, stacklevel=3)
            v = math.inf
        trace.points.append(pt)
        trace.values.append(v)
        if callback:
            callback(len(trace.values), pt, v)

    for u in U:
        evaluate(u)
    while len(trace.values) < budget:
        Ua = np.array(U)
        y = _surrogate_targets(np.array(trace.values))
        if np.ptp(y) == 0:
            u = rng.random(dim)
        else:
            gp = fit_gp(Ua, y, int(rng.integers(1 << 31)))
            u = propose(gp, float(y.min()), dim, rng, anchors=[Ua[int(np.argmin(y))]])
        U.append(u)
        evaluate(u)
    return trace.points[trace.best_index], trace


def bic_evaluator(kind: str, stack: ImputedStack, chain: ChainConfig, mode: str = "posterior_mean"):
    """Objective ``point -> modified BIC`` of a spike model fitted at ``point``."""
    from .models import ModelSpec, fit
    from .selection import bic_for_selection, ols_per_dataset, select_by_median_indicator

    beta_ols = ols_per_dataset(stack)[1] if stack.n > stack.p + 1 else None

    def evaluate(point: dict[str, float]) -> float:
        draws = fit(ModelSpec(kind, dict(point)), stack, chain)
        sel = select_by_median_indicator(draws).selected
        return bic_for_selection(stack, draws, sel, mode, beta_ols)

    return evaluate


def tune(kind: str, stack: ImputedStack, chain: ChainConfig, budget: int = 20, seed: int = 0, mode: str = "posterior_mean"):
    if kind not in SPACES:
        raise ValueError(f"only spike-and-slab models are tuned, got {kind!r}")
    return optimize(SPACES[kind], bic_evaluator(kind, stack, chain, mode), budget, seed)
