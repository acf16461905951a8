import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def random_matrix_suite(n_cases: int, seed: int = 1234, max_dim: int = 12):
    """Seeded matrices mixing well-conditioned, duplicate-column,
    rank-deficient, zero-column, and rescaled cases."""
    gen = np.random.default_rng(seed)
    out = []
    for trial in range(n_cases):
        d = int(gen.integers(2, max_dim + 1))
        k = int(gen.integers(2, max_dim + 1))
        w = gen.normal(size=(d, k))
        mode = trial % 4
        if mode == 1:
            w[:, gen.integers(0, k)] = w[:, gen.integers(0, k)]
        elif mode == 2:
            r = int(gen.integers(1, min(d, k) + 1))
            w = gen.normal(size=(d, r)) @ gen.normal(size=(r, k))
        elif mode == 3:
            w[:, gen.integers(0, k)] = 0.0
            w *= 10.0 ** gen.integers(-3, 4)
        out.append(w)
    return out
