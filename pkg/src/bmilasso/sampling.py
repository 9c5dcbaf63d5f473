"""MCMC plumbing: seeded substreams, chain orchestration, special samplers, R-hat."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.linalg import lapack
from scipy.stats import geninvgauss

from .data import StandardizationState, destandardize_coefficients

_U64 = (1 << 64) - 1


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Philox generator for the substream ``(seed, *keys)``.

    Substreams are derived by hashing the full key tuple through
    ``SeedSequence``, so ``(seed, chain)`` pairs never alias one another.
    """
    entropy = [int(seed) & _U64, *(int(k) for k in keys)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class ChainConfig:
    n_chains: int = 4
    burn_in: int = 2000
    kept: int = 2000
    thin: int = 1
    seed: int = 0
    rhat_threshold: float = 1.1
    compute_rhat: bool = True

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if self.compute_rhat and self.n_chains < 2:
            raise ValueError("R-hat needs n_chains >= 2")
        if self.burn_in < 0 or self.kept < 1 or self.thin < 1:
            raise ValueError("burn_in >= 0, kept >= 1 and thin >= 1 required")
        if self.kept // self.thin < 100:
            raise ValueError("kept/thin must leave at least 100 retained draws per chain")
        if not self.rhat_threshold > 1.0:
            raise ValueError("rhat_threshold must exceed 1")

    @property
    def retained(self) -> int:
        return self.kept // self.thin


@dataclass
class PosteriorDraws:
    """Retained draws from all chains.

    ``beta`` has shape ``(chains, draws, D, p)`` on the standardized scale;
    ``sigma2`` has shape ``(chains, draws)``; ``aux`` maps latent names
    (``lambda2``, ``rho``, ``tau2``, ``gamma``, ...) to arrays whose first two
    axes are ``(chains, draws)``.
    """

    model: str
    beta: np.ndarray
    sigma2: np.ndarray
    aux: dict[str, np.ndarray] = field(default_factory=dict)
    rhat: np.ndarray | None = None
    rhat_threshold: float = 1.1
    column_names: tuple[str, ...] = ()
    standardization: StandardizationState | None = None

    @property
    def n_chains(self) -> int:
        return self.beta.shape[0]

    @property
    def n_draws(self) -> int:
        return self.beta.shape[1]

    @property
    def D(self) -> int:
        return self.beta.shape[2]

    @property
    def p(self) -> int:
        return self.beta.shape[3]

    @property
    def converged(self) -> bool:
        if self.rhat is None:
            return True
        return bool(np.all(self.rhat < self.rhat_threshold))

    @property
    def max_rhat(self) -> float:
        return float(np.max(self.rhat)) if self.rhat is not None else float("nan")

    def beta_original(self) -> np.ndarray:
        """Slopes on the original covariate scale, same shape as ``beta``."""
        if self.standardization is None:
            return self.beta
        return destandardize_coefficients(self.beta, self.standardization)[1]

    def intercepts_original(self) -> np.ndarray:
        if self.standardization is None:
            return np.zeros(self.beta.shape[:3])
        return destandardize_coefficients(self.beta, self.standardization)[0]


# ---------------------------------------------------------------------------
# convergence diagnostics


def rhat(chains, point_mass: bool = False) -> float:
    """Split-chain Gelman-Rubin potential scale reduction factor.

    ``chains`` is an ``(m, n)`` array-like.  Each chain is halved, then
    ``sqrt(((n'-1)/n' * W + B/n') / W)`` is computed from the ``2m`` half-chains
    of length ``n'``.  The result is floored at 1.0.

    Returns ``inf`` (with a warning) when some chain is constant while the
    pooled draws are not: a stuck chain.  All chains constant and equal gives 1.0.
    With ``point_mass=True`` (spike-and-slab coefficients, which legitimately
    sit at exactly zero for a whole chain) constant chains are allowed and only
    a zero pooled within-chain variance yields ``inf``.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 10:
        raise ValueError("rhat needs at least 2 chains of at least 10 draws")
    if np.ptp(x) == 0:
        return 1.0
    if not point_mass and np.any(np.ptp(x, axis=1) == 0):
        warnings.warn("constant chain in R-hat computation", RuntimeWarning, stacklevel=2)
        return math.inf
    half = x.shape[1] // 2
    split = np.concatenate([x[:, :half], x[:, x.shape[1] - half :]], axis=0)
    n = split.shape[1]
    means = split.mean(axis=1)
    W = split.var(axis=1, ddof=1).mean()
    if W == 0:
        warnings.warn("zero within-chain variance in R-hat computation", RuntimeWarning, stacklevel=2)
        return math.inf
    B = n * means.var(ddof=1)
    var_hat = (n - 1) / n * W + B / n
    return max(1.0, math.sqrt(var_hat / W))


def rhat_array(draws: np.ndarray, point_mass: bool = False) -> np.ndarray:
    """R-hat for every scalar in ``draws`` of shape ``(chains, draws, ...)``."""
    m, n = draws.shape[:2]
    flat = draws.reshape(m, n, -1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out = np.array([rhat(flat[:, :, k], point_mass) for k in range(flat.shape[2])])
    return out.reshape(draws.shape[2:])


# ---------------------------------------------------------------------------
# special samplers


def sample_inverse_gaussian(mu, lam, rng: np.random.Generator, size=None):
    """Inverse-Gaussian draws by the Michael-Schucany-Haas transform.

    Uses the cancellation-free root ``mu / (1 + t + sqrt(t (2 + t)))`` with
    ``t = mu * nu^2 / (2 lam)``, so very large ``mu / lam`` stays accurate.
    """
    mu = np.asarray(mu, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(~(mu > 0)) or np.any(~(lam > 0)) or not (np.all(np.isfinite(mu)) and np.all(np.isfinite(lam))):
        raise ValueError("inverse Gaussian needs finite mu > 0 and lam > 0")
    shape = np.broadcast_shapes(mu.shape, lam.shape) if size is None else size
    nu2 = rng.standard_normal(shape) ** 2
    u = rng.random(shape)
    t = mu * nu2 / (2.0 * lam)
    x = mu / (1.0 + t + np.sqrt(t * (2.0 + t)))
    out = np.where(u <= mu / (mu + x), x, mu * mu / x)
    return out if np.ndim(out) else float(out)


def sample_gig_half(a, b, rng: np.random.Generator, size=None):
    """Draw from GIG(1/2, a, b), density proportional to ``x^(-1/2) exp(-(a x + b/x)/2)``.

    ``1/X ~ IG(sqrt(a/b), a)`` for ``b > 0``; ``b == 0`` is the Gamma(1/2, rate a/2) limit.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(~(a > 0)) or np.any(b < 0) or not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("GIG(1/2) needs finite a > 0 and b >= 0")
    shape = np.broadcast_shapes(a.shape, b.shape) if size is None else size
    a_, b_ = np.broadcast_to(a, shape), np.broadcast_to(b, shape)
    pos = b_ > 0
    out = np.empty(shape)
    if np.any(pos):
        mu = np.sqrt(a_[pos] / b_[pos])
        out[pos] = 1.0 / sample_inverse_gaussian(mu, a_[pos], rng, size=mu.shape)
    if np.any(~pos):
        out[~pos] = rng.gamma(0.5, 2.0 / a_[~pos])
    return out if np.ndim(out) else float(out)


def _gig_mode(lam: float, omega: float) -> float:
    if lam >= 1.0:
        return (math.sqrt((lam - 1.0) ** 2 + omega * omega) + (lam - 1.0)) / omega
    return omega / (math.sqrt((1.0 - lam) ** 2 + omega * omega) + (1.0 - lam))


def _gig_rou_shift(lam: float, omega: float, rng: np.random.Generator) -> float:
    """Ratio-of-uniforms with mode shift for ``x^(lam-1) exp(-omega (x + 1/x)/2)``.

    Hormann & Leydold (2014); efficient and valid for ``lam > 2`` or ``omega > 3``.
    """
    t = 0.5 * (lam - 1.0)
    s = 0.25 * omega
    xm = _gig_mode(lam, omega)
    nc = t * math.log(xm) - s * (xm + 1.0 / xm)
    # extrema of (x - xm) sqrt(f(x)) solve y^3 + a y^2 + b y + c = 0
    a = -(2.0 * (lam + 1.0) / omega + xm)
    b = 2.0 * (lam - 1.0) * xm / omega - 1.0
    c = xm
    p = b - a * a / 3.0
    q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c
    fi = math.acos(-q / (2.0 * math.sqrt(-(p * p * p) / 27.0)))
    fak = 2.0 * math.sqrt(-p / 3.0)
    y1 = fak * math.cos(fi / 3.0) - a / 3.0
    y2 = fak * math.cos(fi / 3.0 + 4.0 / 3.0 * math.pi) - a / 3.0
    uplus = (y1 - xm) * math.exp(t * math.log(y1) - s * (y1 + 1.0 / y1) - nc)
    uminus = (y2 - xm) * math.exp(t * math.log(y2) - s * (y2 + 1.0 / y2) - nc)
    while True:
        u, v = rng.random(2)
        x = (uminus + u * (uplus - uminus)) / v + xm
        if x > 0.0 and v > 0.0 and math.log(v) <= t * math.log(x) - s * (x + 1.0 / x) - nc:
            return x


def sample_gig(p: float, a: float, b: float, rng: np.random.Generator) -> float:
    """General GIG(p, a, b) draw (density ``x^(p-1) exp(-(a x + b/x)/2)``).

    Uses a mode-shifted ratio-of-uniforms sampler where it is efficient
    (``|p| > 2`` or ``sqrt(ab) > 3``) and scipy's ``geninvgauss`` elsewhere.
    """
    if not (a > 0 and b >= 0):
        raise ValueError("GIG needs a > 0 and b >= 0")
    if b == 0:
        if p <= 0:
            raise ValueError("GIG with b = 0 needs p > 0")
        return float(rng.gamma(p, 2.0 / a))
    omega = math.sqrt(a * b)
    alpha = math.sqrt(b / a)
    lam = abs(p)
    if lam > 2.0 or omega > 3.0:
        x = _gig_rou_shift(lam, omega, rng)
    else:
        x = float(geninvgauss.rvs(lam, omega, random_state=rng))
    # X ~ GIG(-lam, omega)  <=>  1/X ~ GIG(lam, omega)
    return alpha / x if p < 0 else alpha * x


def sample_inv_gamma(shape, rate, rng: np.random.Generator):
    """InvGamma(shape, rate) draws: ``rate / Gamma(shape, 1)``, one per broadcast element."""
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    size = np.broadcast_shapes(shape.shape, rate.shape)
    out = rate / rng.gamma(np.broadcast_to(shape, size))
    return out if np.ndim(out) else float(out)


def cholesky_or_raise(precision: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(precision)
    except np.linalg.LinAlgError:
        pass
    P = np.asarray(precision, dtype=float)
    batch = P.reshape(-1, P.shape[-2], P.shape[-1])
    for k, mat in enumerate(batch):
        _, info = lapack.dpotrf(mat, lower=1)
        if info > 0:
            where = f" (batch {k})" if batch.shape[0] > 1 else ""
            raise np.linalg.LinAlgError(
                f"precision matrix not positive definite at leading pivot {info - 1}{where}"
            )
    raise np.linalg.LinAlgError("precision matrix not positive definite")


def sample_mvn_precision(mean_rhs, precision, rng: np.random.Generator) -> np.ndarray:
    """Draw ``N(P^-1 b, P^-1)`` given ``b = mean_rhs`` and ``P = precision``.

    One Cholesky factorization ``P = L L^T`` and two triangular systems;
    batched over leading axes.
    """
    b = np.asarray(mean_rhs, dtype=float)
    P = np.asarray(precision, dtype=float)
    L = cholesky_or_raise(P)
    z = rng.standard_normal(b.shape)
    w = np.linalg.solve(L, b[..., None])[..., 0] + z
    return np.linalg.solve(np.swapaxes(L, -1, -2), w[..., None])[..., 0]


# ---------------------------------------------------------------------------
# chain orchestration


class NonFiniteDrawError(FloatingPointError):
    pass


def _check_finite(rec: dict[str, np.ndarray], chain: int, it: int) -> None:
    for name, v in rec.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteDrawError(f"non-finite {name} at chain {chain}, iteration {it}")


def _run_one(kernel, cfg: ChainConfig, chain: int) -> dict[str, np.ndarray]:
    rng = make_rng(cfg.seed, chain)
    state = kernel.init(rng, chain)
    total = cfg.burn_in + cfg.kept
    S = cfg.retained
    store: dict[str, np.ndarray] = {}
    k = 0
    for it in range(1, total + 1):
        state = kernel.sweep(state, rng)
        if it <= cfg.burn_in or (it - cfg.burn_in) % cfg.thin:
            continue
        if k >= S:
            break
        rec = kernel.record(state)
        _check_finite(rec, chain, it)
        if not store:
            store = {name: np.empty((S,) + np.shape(v)) for name, v in rec.items()}
        for name, v in rec.items():
            store[name][k] = v
        k += 1
    return store


def run_chains(model, stack, cfg: ChainConfig, threads: int = 1, **kernel_options) -> PosteriorDraws:
    """Run ``cfg.n_chains`` Gibbs chains of ``model`` on a standardized ``stack``.

    ``model`` must provide ``kernel(stack, **options)`` returning an object
    with ``init(rng, chain)``, ``sweep(state, rng)`` and ``record(state)``.
    Chain ``c`` draws from substream ``(cfg.seed, c)``; results are merged in
    chain order, so any ``threads`` value gives identical output.
    """
    kernel = model.kernel(stack, **kernel_options)
    chains = range(cfg.n_chains)
    if threads > 1 and cfg.n_chains > 1:
        with ThreadPoolExecutor(max_workers=min(threads, cfg.n_chains)) as ex:
            results = list(ex.map(lambda c: _run_one(kernel, cfg, c), chains))
    else:
        results = [_run_one(kernel, cfg, c) for c in chains]
    merged = {name: np.stack([r[name] for r in results]) for name in results[0]}
    beta = merged.pop("beta")
    sigma2 = merged.pop("sigma2")
    r_hat = rhat_array(beta, point_mass="gamma" in merged) if cfg.compute_rhat else None
    return PosteriorDraws(
        model=model.kind,
        beta=beta,
        sigma2=sigma2,
        aux=merged,
        rhat=r_hat,
        rhat_threshold=cfg.rhat_threshold,
        column_names=tuple(stack.column_names),
    )


def dump_draws(draws: PosteriorDraws, directory) -> list:
    """Write one CSV per parameter family: ``chain,iter,index,value``."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    families: dict[str, Any] = {"beta": draws.beta, "sigma2": draws.sigma2, **draws.aux}
    written = []
    for name, arr in families.items():
        arr = np.asarray(arr)
        C, S = arr.shape[:2]
        flat = arr.reshape(C, S, -1)
        path = directory / f"draws_{name}.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("chain,iter,index,value\n")
            for c in range(C):
                for s in range(S):
                    for k in range(flat.shape[2]):
                        fh.write(f"{c},{s},{k},{flat[c, s, k]:.17g}\n")
        written.append(path)
    return written
