"""Independent reference implementations shared by unit and acceptance tests."""

import math
from fractions import Fraction

import numpy as np

from conformal_ssl.model_core import ModelParams, batch_loss


def brute_score(p, label, lam, k_reg, u=None):
    """Walk the classes in rank order and add mass until the label is reached."""
    order = sorted(range(len(p)), key=lambda c: (-p[c], c))
    total = 0.0
    for i, c in enumerate(order, start=1):
        if c == label:
            pen = lam * max(i - k_reg, 0)
            return (total + p[c] if u is None else total + u * p[c]) + pen
        total += p[c]
    raise AssertionError


def brute_quantile(scores, alpha):
    n = len(scores)
    k = math.ceil((n + 1) * (1 - Fraction(str(alpha))))
    return sorted(scores)[min(k, n) - 1]


def flat_params(p: ModelParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in p.arrays()])


def unflat(p: ModelParams, v: np.ndarray) -> ModelParams:
    shapes = [a.shape for a in p.arrays()]
    out, i = [], 0
    for s in shapes:
        k = int(np.prod(s))
        out.append(v[i:i + k].reshape(s))
        i += k
    return p.replace(*out)


def finite_difference(p, X, Y, G, nce, h=1e-5):
    v = flat_params(p)
    g = np.zeros_like(v)
    for i in range(v.size):
        up, dn = v.copy(), v.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (batch_loss(unflat(p, up), X, Y, G, nce) - batch_loss(unflat(p, dn), X, Y, G, nce)) / (2 * h)
    return g


def random_problem(rng, n=6, d=3, h=5, c=3):
    p = ModelParams(
        rng.normal(size=(h, d)), rng.normal(size=h), rng.normal(size=(c, h)), rng.normal(size=c)
    )
    X = rng.normal(size=(n, d))
    Y = (rng.random((n, c)) < 0.4).astype(float)
    G = (rng.random((n, c)) < 0.6).astype(float)
    G[np.arange(n), rng.integers(0, c, n)] = 1.0
    nce = rng.random(n) < 0.4
    return p, X, Y, G, nce
