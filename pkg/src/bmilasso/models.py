"""The five Bayesian MI-LASSO models and their Gibbs updates.

Every model shares the likelihood ``y_d ~ N(X_d beta_d, sigma^2 I)`` for
``d = 1..D`` with ``p(sigma) ∝ 1/sigma``; they differ in the grouped prior
placed on ``beta_{.,j} = (beta_{1,j}, ..., beta_{D,j})``:

MultiLaplace
    ``beta_{d,j} ~ N(0, lambda2_j)``, ``lambda2_j ~ Gamma((D+1)/2, 2/(D rho))``,
    ``rho ~ Gamma(r, s)``.
Horseshoe
    ``beta_{d,j} ~ N(0, tau2 lambda2_j)``, ``lambda_j, tau ~ C+(0, 1)``.
ARD
    ``beta_{d,j} ~ N(0, 1/lambda2_j)``, ``p(lambda2_j) ∝ 1/lambda2_j``.
SpikeNormal
    ``beta_{.,j} ~ gamma_j N(0, v0 I) + (1 - gamma_j) delta_0``, ``gamma_j ~ Bernoulli(p0)``.
SpikeLaplace
    ``beta_{.,j} ~ gamma_j N(0, tau2_j I) + (1 - gamma_j) delta_0``,
    ``tau2_j ~ Gamma((D+1)/2, 2/(D lambda))``, ``gamma_j | pi_j ~ Bernoulli(pi_j)``,
    ``pi_j ~ Beta(a, b)``.

The second argument of each Gamma is ambiguous (scale or rate); the reading is
a field of :class:`ModelSpec`.  Defaults reproduce the prior calibration stated
for the default hyperparameters: for MultiLaplace with ``r=2, s=15, D=5`` both
arguments read as rates give ``E[lambda2] = 1`` with about 1% of draws above
five times the mean; for SpikeLaplace the scale reading gives prior variance
of ``beta`` near one.

Sweep order: ``beta -> locals -> sigma2`` for shrinkage models and
``indicators -> beta -> slabs -> sigma2`` for spike models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .data import ImputedStack, standardize
from .sampling import (
    ChainConfig,
    PosteriorDraws,
    run_chains,
    sample_gig,
    sample_gig_half,
    sample_inv_gamma,
    sample_mvn_precision,
)

MULTI_LAPLACE = "MultiLaplace"
HORSESHOE = "Horseshoe"
ARD = "ARD"
SPIKE_NORMAL = "SpikeNormal"
SPIKE_LAPLACE = "SpikeLaplace"

SHRINKAGE_KINDS = (MULTI_LAPLACE, HORSESHOE, ARD)
SPIKE_KINDS = (SPIKE_NORMAL, SPIKE_LAPLACE)
KINDS = SHRINKAGE_KINDS + SPIKE_KINDS

DEFAULT_HYPERPARAMS = {
    MULTI_LAPLACE: {"r": 2.0, "s": 15.0},
    HORSESHOE: {},
    ARD: {},
    SPIKE_NORMAL: {"p0": 0.5, "v0": 4.0},
    SPIKE_LAPLACE: {"a": 1.0, "b": 1.0, "lambda": 6.0 / 11.0},
}

ARD_RATE_FLOOR = 1e-10
SIGMA_RATE_FLOOR = 1e-12
_READINGS = ("rate", "scale")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    hyperparams: Mapping[str, float] = field(default_factory=dict)
    lambda2_reading: str = "rate"
    rho_reading: str = "rate"
    slab_reading: str = "scale"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        given = dict(self.hyperparams)
        allowed = DEFAULT_HYPERPARAMS[self.kind]
        if not allowed and given:
            raise ValueError(f"{self.kind} takes no hyperparameters, got {sorted(given)}")
        unknown = set(given) - set(allowed)
        if unknown:
            raise ValueError(f"unknown {self.kind} hyperparameters {sorted(unknown)}")
        hp = {**allowed, **{k: float(v) for k, v in given.items()}}
        for k, v in hp.items():
            if k == "p0":
                if not 0.0 < v < 1.0:
                    raise ValueError("p0 must lie in (0, 1)")
            elif not (v > 0 and math.isfinite(v)):
                raise ValueError(f"hyperparameter {k} must be positive and finite")
        for name in ("lambda2_reading", "rho_reading", "slab_reading"):
            if getattr(self, name) not in _READINGS:
                raise ValueError(f"{name} must be 'rate' or 'scale'")
        object.__setattr__(self, "hyperparams", MappingProxyType(hp))

    @property
    def is_spike(self) -> bool:
        return self.kind in SPIKE_KINDS

    def kernel(self, stack: ImputedStack, frozen=(), init=None) -> "GibbsKernel":
        return GibbsKernel(self, SuffStats.from_stack(stack), frozen=frozen, init=init)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hyperparams": dict(self.hyperparams)}


@dataclass(frozen=True)
class SuffStats:
    """Per-imputation cross products of a (standardized) stack."""

    X: np.ndarray  # (D, n, p)
    Y: np.ndarray  # (D, n)
    XtX: np.ndarray  # (D, p, p)
    Xty: np.ndarray  # (D, p)

    def _cached(self, name, build):
        value = self.__dict__.get(name)
        if value is None:
            value = np.ascontiguousarray(build())
            object.__setattr__(self, name, value)
        return value

    @property
    def gram_cols(self) -> np.ndarray:
        """``XtX`` rearranged to ``(p, p, D)`` with ``[j, k, d] = XtX[d, k, j]``."""
        return self._cached("_gram_cols", lambda: self.XtX.transpose(2, 1, 0))

    @property
    def gram_diag(self) -> np.ndarray:
        return self._cached("_gram_diag", lambda: np.einsum("djj->jd", self.XtX))

    @property
    def xty_rows(self) -> np.ndarray:
        return self._cached("_xty_rows", lambda: self.Xty.T)

    @classmethod
    def from_stack(cls, stack: ImputedStack) -> "SuffStats":
        X, Y = stack.X, stack.Y
        return cls(X, Y, np.einsum("dni,dnj->dij", X, X), np.einsum("dnj,dn->dj", X, Y))

    @property
    def D(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def p(self) -> int:
        return self.X.shape[2]


@dataclass(frozen=True)
class LatentState:
    beta: np.ndarray  # (D, p)
    sigma2: float
    lambda2: np.ndarray | None = None  # (p,)
    rho: float | None = None
    tau2: float | None = None
    nu: np.ndarray | None = None
    xi: float | None = None
    gamma: np.ndarray | None = None  # (p,) of {0, 1}
    pi: np.ndarray | None = None
    tau2_slab: np.ndarray | None = None


def _prior_precision(state: LatentState, model: ModelSpec) -> np.ndarray:
    kind = model.kind
    if kind == MULTI_LAPLACE:
        return 1.0 / state.lambda2
    if kind == HORSESHOE:
        return 1.0 / (state.tau2 * state.lambda2)
    if kind == ARD:
        return np.asarray(state.lambda2, dtype=float)
    if kind == SPIKE_NORMAL:
        return np.full(state.beta.shape[1], 1.0 / model.hyperparams["v0"])
    return 1.0 / state.tau2_slab


def update_beta(state: LatentState, stats: SuffStats, model: ModelSpec, rng) -> LatentState:
    """Draw every ``beta_d`` from its Gaussian full conditional.

    Precision ``X_d'X_d / sigma2 + diag(prior precision)``; spike models only
    update the active groups and pin the rest at exactly zero.
    """
    prec = _prior_precision(state, model)
    if model.is_spike:
        active = np.flatnonzero(state.gamma == 1)
    else:
        active = np.arange(stats.p)
    beta = np.zeros((stats.D, stats.p))
    if active.size:
        ix = np.ix_(range(stats.D), active, active)
        P = stats.XtX[ix] / state.sigma2
        idx = np.arange(active.size)
        P[:, idx, idx] += prec[active]
        rhs = stats.Xty[:, active] / state.sigma2
        beta[:, active] = sample_mvn_precision(rhs, P, rng)
    return replace(state, beta=beta)


def _group_ss(beta: np.ndarray) -> np.ndarray:
    return np.sum(beta * beta, axis=0)


def update_multilaplace_locals(state: LatentState, stats: SuffStats, model: ModelSpec, rng) -> LatentState:
    """``lambda2_j | rest ~ GIG(1/2, 2c, S_j)`` where ``c`` is the Gamma prior rate; then ``rho``."""
    D, p = stats.D, stats.p
    S = _group_ss(state.beta)
    shape = (D + 1) / 2.0
    r, s = model.hyperparams["r"], model.hyperparams["s"]
    rho = state.rho
    rate = D * rho / 2.0 if model.lambda2_reading == "scale" else 2.0 / (D * rho)
    lambda2 = sample_gig_half(np.full(p, 2.0 * rate), S, rng)
    rho_rate = s if model.rho_reading == "rate" else 1.0 / s
    total = float(np.sum(lambda2))
    if model.lambda2_reading == "scale":
        rho = float(rng.gamma(r + p * shape, 1.0 / (rho_rate + 0.5 * D * total)))
    else:
        rho = sample_gig(r - p * shape, 2.0 * rho_rate, 4.0 * total / D, rng)
    return replace(state, lambda2=lambda2, rho=rho)


def update_horseshoe_locals(state: LatentState, stats: SuffStats, rng) -> LatentState:
    """Inverse-gamma auxiliary scheme for the two half-Cauchy scales."""
    D, p = stats.D, stats.p
    S = _group_ss(state.beta)
    lambda2 = sample_inv_gamma((D + 1) / 2.0, 1.0 / state.nu + S / (2.0 * state.tau2), rng)
    nu = sample_inv_gamma(np.ones(p), 1.0 + 1.0 / lambda2, rng)
    tau2 = float(sample_inv_gamma((p * D + 1) / 2.0, 1.0 / state.xi + np.sum(S / (2.0 * lambda2)), rng))
    xi = float(sample_inv_gamma(1.0, 1.0 + 1.0 / tau2, rng))
    return replace(state, lambda2=lambda2, nu=nu, tau2=tau2, xi=xi)


def update_ard_locals(state: LatentState, stats: SuffStats, rng) -> LatentState:
    """``lambda2_j | rest ~ Gamma(D/2, rate max(S_j, 1e-10)/2)`` (a precision)."""
    S = np.maximum(_group_ss(state.beta), ARD_RATE_FLOOR)
    lambda2 = rng.gamma(stats.D / 2.0, 2.0 / S)
    return replace(state, lambda2=lambda2)


def _slab_variance(state: LatentState, model: ModelSpec) -> np.ndarray:
    if model.kind == SPIKE_NORMAL:
        return np.full(state.beta.shape[1], model.hyperparams["v0"])
    return state.tau2_slab


def _prior_log_odds(state: LatentState, model: ModelSpec) -> np.ndarray:
    if model.kind == SPIKE_NORMAL:
        p0 = model.hyperparams["p0"]
        return np.full(state.beta.shape[1], math.log(p0) - math.log1p(-p0))
    pi = state.pi
    # a Beta draw can round to exactly 0 or 1; +-inf odds give the limiting probability
    with np.errstate(divide="ignore"):
        return np.log(pi) - np.log1p(-pi)


def inclusion_log_bayes_factor(c, s, sigma2, v):
    """Log marginal-likelihood ratio (slab vs spike) for one group.

    ``c[d] = x_dj' r_d`` with ``r_d`` the residual excluding group ``j``,
    ``s[d] = x_dj' x_dj``; ``v`` the slab variance.  Summed over ``d``.
    """
    q = s / sigma2 + 1.0 / v
    return float(np.sum(-0.5 * np.log(v * q) + 0.5 * (c / sigma2) ** 2 / q))


def update_spike_indicators(state: LatentState, stats: SuffStats, model: ModelSpec, rng) -> LatentState:
    """Collapsed draw of each ``gamma_j`` with ``beta_{.,j}`` integrated out.

    Groups are visited in index order; each ``(gamma_j, beta_{.,j})`` pair is
    drawn jointly, then SpikeLaplace weights ``pi_j ~ Beta(a + gamma_j, b + 1 - gamma_j)``.
    """
    # group-major copies keep the per-group work on contiguous rows
    beta = np.ascontiguousarray(state.beta.T)  # (p, D)
    gamma = state.gamma.copy()
    inv_s2 = 1.0 / state.sigma2
    v_all = _slab_variance(state, model)
    log_odds = _prior_log_odds(state, model)
    cols = stats.gram_cols  # (p, p, D): cols[j, k, d] = XtX[d, k, j]
    diag = stats.gram_diag  # (p, D)
    xty = stats.xty_rows  # (p, D)
    u = rng.random(stats.p)
    z = rng.standard_normal((stats.p, stats.D))
    fitted = np.einsum("jkd,jd->kd", cols, beta)  # X_d'X_d beta_d, group-major
    for j in range(stats.p):
        s = diag[j]
        old = beta[j]
        c = xty[j] - fitted[j] + s * old
        v = v_all[j]
        q = s * inv_s2 + 1.0 / v
        cs = c * inv_s2
        x = log_odds[j] + 0.5 * (cs * cs / q - np.log(v * q)).sum()
        prob = 1.0 / (1.0 + math.exp(-x)) if x > -700.0 else 0.0
        if u[j] < prob:
            gamma[j] = 1
            new = cs / q + z[j] / np.sqrt(q)
        else:
            gamma[j] = 0
            if not old.any():
                continue
            new = np.zeros(stats.D)
        fitted += cols[j] * (new - old)
        beta[j] = new
    beta = np.ascontiguousarray(beta.T)
    pi = state.pi
    if model.kind == SPIKE_LAPLACE:
        a, b = model.hyperparams["a"], model.hyperparams["b"]
        pi = rng.beta(a + gamma, b + 1 - gamma)
    return replace(state, beta=beta, gamma=gamma, pi=pi)


def update_spike_slabs(state: LatentState, stats: SuffStats, model: ModelSpec, rng) -> LatentState:
    """SpikeLaplace slab scales: GIG(1/2) for active groups, prior draw otherwise."""
    D, p = stats.D, stats.p
    lam = model.hyperparams["lambda"]
    rate = D * lam / 2.0 if model.slab_reading == "scale" else 2.0 / (D * lam)
    S = _group_ss(state.beta)
    active = state.gamma == 1
    tau2 = np.empty(p)
    tau2[active] = sample_gig_half(np.full(int(active.sum()), 2.0 * rate), S[active], rng)
    tau2[~active] = rng.gamma((D + 1) / 2.0, 1.0 / rate, size=int((~active).sum()))
    return replace(state, tau2_slab=tau2)


def residual_ss(beta: np.ndarray, stats: SuffStats) -> float:
    resid = stats.Y - np.einsum("dnp,dp->dn", stats.X, beta)
    return float(np.sum(resid * resid))


def update_sigma(state: LatentState, stats: SuffStats, rng) -> LatentState:
    """``sigma2 | rest ~ InvGamma(nD/2, RSS/2)`` with RSS floored at 1e-12."""
    rss = max(residual_ss(state.beta, stats), SIGMA_RATE_FLOOR)
    sigma2 = float(sample_inv_gamma(stats.n * stats.D / 2.0, rss / 2.0, rng))
    return replace(state, sigma2=sigma2)


# ---------------------------------------------------------------------------


_AUX_BY_KIND = {
    MULTI_LAPLACE: ("lambda2", "rho"),
    HORSESHOE: ("lambda2", "tau2"),
    ARD: ("lambda2",),
    SPIKE_NORMAL: ("gamma",),
    SPIKE_LAPLACE: ("gamma", "pi", "tau2_slab"),
}


class GibbsKernel:
    """One model's Gibbs sweep over a fixed stack.

    ``frozen`` names latents (``sigma2``, ``lambda2``, ``rho``, ``tau2``,
    ``gamma``, ``pi``, ``tau2_slab``) that keep their initial values; ``init``
    overrides initial values (dict of latent name to value).
    """

    def __init__(self, model: ModelSpec, stats: SuffStats, frozen=(), init=None):
        self.model = model
        self.stats = stats
        self.frozen = frozenset(frozen)
        self.init_values = dict(init or {})
        unknown = self.frozen - set(LatentState.__dataclass_fields__)
        if unknown:
            raise ValueError(f"cannot freeze unknown latents {sorted(unknown)}")

    def init(self, rng, chain: int) -> LatentState:
        st = self.stats
        D, p = st.D, st.p
        ridge = np.linalg.solve(st.XtX + np.eye(p), st.Xty[..., None])[..., 0]
        beta = ridge + 0.1 * rng.standard_normal((D, p))
        rss = residual_ss(ridge, st) / max(st.n * D, 1)
        sigma2 = max(rss, 1e-6) * float(np.exp(0.5 * rng.standard_normal()))
        kind = self.model.kind
        fields = {"beta": beta, "sigma2": sigma2}
        if kind in (MULTI_LAPLACE, HORSESHOE, ARD):
            fields["lambda2"] = np.ones(p)
        if kind == MULTI_LAPLACE:
            fields["rho"] = 1.0
        if kind == HORSESHOE:
            fields.update(tau2=1.0, nu=np.ones(p), xi=1.0)
        if kind in SPIKE_KINDS:
            fields["gamma"] = np.ones(p, dtype=np.int64)
        if kind == SPIKE_LAPLACE:
            fields.update(pi=np.full(p, 0.5), tau2_slab=np.ones(p))
        for k, v in self.init_values.items():
            fields[k] = np.array(v, dtype=float) if np.ndim(v) else float(v)
        if "gamma" in fields:
            fields["gamma"] = np.asarray(fields["gamma"]).astype(np.int64)
            fields["beta"] = np.where(fields["gamma"] == 1, fields["beta"], 0.0)
        return LatentState(**fields)

    def _keep(self, new: LatentState, old: LatentState) -> LatentState:
        if not self.frozen:
            return new
        return replace(new, **{k: getattr(old, k) for k in self.frozen})

    def sweep(self, state: LatentState, rng) -> LatentState:
        m, st = self.model, self.stats
        kind = m.kind
        if kind in SPIKE_KINDS:
            if "gamma" not in self.frozen:
                state = self._keep(update_spike_indicators(state, st, m, rng), state)
            state = update_beta(state, st, m, rng)
            if kind == SPIKE_LAPLACE:
                state = self._keep(update_spike_slabs(state, st, m, rng), state)
        else:
            state = update_beta(state, st, m, rng)
            if kind == MULTI_LAPLACE:
                state = self._keep(update_multilaplace_locals(state, st, m, rng), state)
            elif kind == HORSESHOE:
                state = self._keep(update_horseshoe_locals(state, st, rng), state)
            else:
                state = self._keep(update_ard_locals(state, st, rng), state)
        if "sigma2" not in self.frozen:
            state = update_sigma(state, st, rng)
        return state

    def record(self, state: LatentState) -> dict[str, np.ndarray]:
        rec = {"beta": state.beta, "sigma2": state.sigma2}
        for name in _AUX_BY_KIND[self.model.kind]:
            rec[name] = getattr(state, name)
        return rec


def fit(model: ModelSpec, stack: ImputedStack, cfg: ChainConfig | None = None, threads: int = 1, **kernel_options) -> PosteriorDraws:
    """Standardize ``stack`` (unless already standardized) and run the Gibbs chains.

    The returned draws carry the standardization state, so
    :meth:`PosteriorDraws.beta_original` gives slopes on the input scale.
    """
    cfg = cfg or ChainConfig()
    if stack.provenance == "standardized":
        std, state = stack, None
    else:
        std, state = standardize(stack)
    draws = run_chains(model, std, cfg, threads=threads, **kernel_options)
    draws.standardization = state
    return draws


def posterior_summary(draws: PosteriorDraws) -> list[dict]:
    """Pooled per-covariate summary on the original scale: mean, sd, 2.5%, 97.5%."""
    b = draws.beta_original()  # (C, S, D, p)
    pooled = np.moveaxis(b, 3, 0).reshape(draws.p, -1)
    names = draws.column_names or tuple(f"X{j + 1}" for j in range(draws.p))
    rows = []
    for j in range(draws.p):
        col = pooled[j]
        lo, hi = np.quantile(col, [0.025, 0.975])
        rows.append(
            {
                "name": names[j],
                "mean": float(col.mean()),
                "sd": float(col.std(ddof=1)),
                "q2.5": float(lo),
                "q97.5": float(hi),
            }
        )
    return rows
