import numpy as np
import pytest

from bmilasso.data import ImputedStack


def make_stack(D=3, n=40, p=4, beta=None, noise=1.0, seed=0, jitter=0.1):
    """Synthetic stack whose imputations differ by small covariate jitter."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    beta = np.zeros(p) if beta is None else np.asarray(beta, dtype=float)
    y = X @ beta + noise * rng.normal(size=n)
    Xs = np.stack([X + jitter * rng.normal(size=X.shape) for _ in range(D)])
    return ImputedStack.from_arrays(Xs, np.stack([y] * D))


@pytest.fixture
def small_stack():
    return make_stack(beta=[2.0, 0.0, -1.0, 0.0])
