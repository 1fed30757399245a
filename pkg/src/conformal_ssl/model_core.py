"""One-hidden-layer MLP with inverted dropout, trained by plain SGD.

The network is small on purpose: it only needs to be stochastic enough for
MC-dropout and trainable in a second or two on desk-scale data.  All maths is
numpy; gradients are written out by hand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _rng
from .errors import CalibrationError, InvalidArgumentError, NumericError, ShapeError

EPS = 1e-7


@dataclass(frozen=True)
class ModelParams:
    """Weights of the classifier.

    ``W1`` is (hidden, d), ``W2`` is (C, hidden).  Arrays are copied and made
    read-only on construction so a params object can be shared freely.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("W1", "b1", "W2", "b2"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"{name} has non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        h, _ = self.W1.shape
        c, h2 = self.W2.shape
        if self.b1.shape != (h,) or self.b2.shape != (c,) or h2 != h:
            raise ShapeError(
                f"inconsistent shapes W1={self.W1.shape} b1={self.b1.shape} "
                f"W2={self.W2.shape} b2={self.b2.shape}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidArgumentError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def n_features(self) -> int:
        return self.W1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.W2.shape[0]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.W1, self.b1, self.W2, self.b2

    def replace(self, W1, b1, W2, b2) -> "ModelParams":
        return ModelParams(W1, b1, W2, b2, self.dropout_rate, self.seed)


@dataclass(frozen=True)
class ParamGrads:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in (self.W1, self.b1, self.W2, self.b2)])


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    epochs: int = 300
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or not math.isfinite(self.lr):
            raise InvalidArgumentError(f"lr must be finite and >= 0, got {self.lr}")
        if self.epochs < 0:
            raise InvalidArgumentError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidArgumentError(f"batch_size must be >= 1, got {self.batch_size}")


def init_params(
    n_features: int,
    n_classes: int,
    hidden_dim: int = 64,
    dropout_rate: float = 0.1,
    seed: int = 0,
) -> ModelParams:
    """Fresh network with Glorot-normal weights and zero biases."""
    if n_features < 1 or n_classes < 2 or hidden_dim < 1:
        raise InvalidArgumentError(
            f"need n_features >= 1, n_classes >= 2, hidden_dim >= 1; "
            f"got {n_features}, {n_classes}, {hidden_dim}"
        )
    rng = _rng.derive_rng(seed, _rng.INIT)
    W1 = rng.normal(0.0, math.sqrt(2.0 / (n_features + hidden_dim)), size=(hidden_dim, n_features))
    W2 = rng.normal(0.0, math.sqrt(2.0 / (hidden_dim + n_classes)), size=(n_classes, hidden_dim))
    return ModelParams(W1, np.zeros(hidden_dim), W2, np.zeros(n_classes), dropout_rate, seed)


def softmax(logits, T: float = 1.0) -> np.ndarray:
    """Temperature softmax over the last axis (vector or row-wise matrix)."""
    z = np.asarray(logits, dtype=np.float64)
    if not (T > 0 and math.isfinite(T)):
        raise InvalidArgumentError(f"temperature must be positive and finite, got {T}")
    if not np.all(np.isfinite(z)):
        raise InvalidArgumentError("logits must be finite")
    z = z / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dropout_masks(rate: float, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multipliers: 0 with probability ``rate``, else 1/(1-rate)."""
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def _as_matrix(params: ModelParams, x) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.n_features:
        raise ShapeError(f"expected features of width {params.n_features}, got shape {np.shape(x)}")
    return X, single


def _logits(params: ModelParams, X: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    a = np.tanh(X @ params.W1.T + params.b1)
    if mask is not None:
        a = a * mask
    return a @ params.W2.T + params.b2


def forward(params: ModelParams, x, dropout_active: bool = False, rng_seed: int = 0) -> np.ndarray:
    """Logits for one sample (vector) or a batch (matrix).

    With ``dropout_active`` the hidden mask is drawn from a stream keyed by
    ``rng_seed`` alone, so the output is a pure function of the arguments.
    """
    X, single = _as_matrix(params, x)
    mask = None
    if dropout_active and params.dropout_rate > 0:
        rng = _rng.derive_rng(rng_seed, _rng.MC_DROPOUT)
        mask = dropout_masks(params.dropout_rate, (X.shape[0], params.hidden_dim), rng)
    out = _logits(params, X, mask)
    return out[0] if single else out


def predict_proba(params: ModelParams, X, T: float = 1.0) -> np.ndarray:
    return softmax(forward(params, X), T)


# -- losses ------------------------------------------------------------------


def _check_loss_inputs(y_tilde, y_hat, g):
    y = np.asarray(y_tilde, dtype=np.float64)
    p = np.asarray(y_hat, dtype=np.float64)
    m = np.asarray(g, dtype=np.float64)
    if not (y.shape == p.shape == m.shape):
        raise ShapeError(f"shape mismatch: y_tilde {y.shape}, y_hat {p.shape}, g {m.shape}")
    s = m.sum(axis=-1)
    if np.any(s < 1):
        raise InvalidArgumentError("selection mask g is all zero; loss undefined")
    return y, np.clip(p, EPS, 1.0 - EPS), m, s


def loss_bce(y_tilde, y_hat, g) -> float:
    """Masked binary cross-entropy averaged over the ``s`` selected classes."""
    y, p, m, s = _check_loss_inputs(y_tilde, y_hat, g)
    return float(-(m * (y * np.log(p) + (1 - y) * np.log(1 - p))).sum() / s)


def loss_nce(y_tilde, y_hat, g) -> float:
    """Negative cross-entropy: only selected classes with target 0 contribute."""
    y, p, m, s = _check_loss_inputs(y_tilde, y_hat, g)
    return float(-(m * (1 - y) * np.log(1 - p)).sum() / s)


def supervised_loss(y_onehot, y_hat) -> float:
    y = np.asarray(y_onehot, dtype=np.float64)
    return loss_bce(y, y_hat, np.ones_like(y))


def per_sample_losses(Y, P, G, nce) -> np.ndarray:
    """Vectorised BCE / NCE per row; ``nce`` picks the negative-only loss."""
    Y, Pc, G, s = _check_loss_inputs(Y, P, G)
    neg = -(1 - Y) * np.log(1 - Pc)
    pos = -Y * np.log(Pc)
    nce = np.asarray(nce, dtype=bool)
    terms = np.where(nce[:, None], neg, pos + neg)
    return (G * terms).sum(axis=1) / s


def batch_loss(params: ModelParams, X, Y, G, nce=None, mask=None) -> float:
    X, _ = _as_matrix(params, X)
    if nce is None:
        nce = np.zeros(X.shape[0], dtype=bool)
    P = softmax(_logits(params, X, mask))
    return float(per_sample_losses(Y, P, G, nce).mean())


def gradients(params: ModelParams, X, Y, G, nce=None, mask=None) -> ParamGrads:
    """Analytic gradient of :func:`batch_loss` with respect to every weight.

    ``mask`` is an optional (n, hidden) dropout multiplier matrix; pass
    ``None`` for the deterministic network.
    """
    X, _ = _as_matrix(params, X)
    n = X.shape[0]
    if n == 0:
        raise InvalidArgumentError("empty batch")
    Y = np.asarray(Y, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    nce = np.zeros(n, dtype=bool) if nce is None else np.asarray(nce, dtype=bool)
    if np.any(G.sum(axis=1) < 1):
        raise InvalidArgumentError("selection mask g is all zero; loss undefined")
    return ParamGrads(*_backprop(*params.arrays(), X, Y, G, nce, mask))


def _backprop(W1, b1, W2, b2, X, Y, G, nce, mask):
    n = X.shape[0]
    s = G.sum(axis=1, keepdims=True)
    a = np.tanh(X @ W1.T + b1)
    ad = a if mask is None else a * mask
    P = softmax(ad @ W2.T + b2)

    Pc = np.clip(P, EPS, 1 - EPS)
    inside = (P > EPS) & (P < 1 - EPS)  # clip has zero slope outside
    dneg = (1 - Y) / (1 - Pc)
    dpos = -Y / Pc
    dP = np.where(nce[:, None], dneg, dpos + dneg) * G / s * inside / n

    dz2 = P * (dP - (P * dP).sum(axis=1, keepdims=True))
    dad = dz2 @ W2
    dz1 = (dad if mask is None else dad * mask) * (1 - a * a)
    return dz1.T @ X, dz1.sum(axis=0), dz2.T @ ad, dz2.sum(axis=0)


def train(params: ModelParams, X, Y, G, nce=None, cfg: TrainConfig = TrainConfig()) -> ModelParams:
    """Mini-batch SGD on the composite loss. Deterministic given ``cfg.seed``."""
    X, _ = _as_matrix(params, X)
    n = X.shape[0]
    if n == 0:
        raise InvalidArgumentError("cannot train on an empty dataset")
    Y = np.asarray(Y, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    nce = np.zeros(n, dtype=bool) if nce is None else np.asarray(nce, dtype=bool)
    if Y.shape != (n, params.n_classes) or G.shape != Y.shape or nce.shape != (n,):
        raise ShapeError("targets, masks and routing flags must align with X")

    if np.any(G.sum(axis=1) < 1):
        raise InvalidArgumentError("every training row needs at least one selected class")
    W1, b1, W2, b2 = (a.copy() for a in params.arrays())
    if cfg.lr == 0 or cfg.epochs == 0:
        return params.replace(W1, b1, W2, b2)

    rng = _rng.derive_rng(cfg.seed, _rng.TRAIN)
    bs = min(cfg.batch_size, n)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            mask = None
            if params.dropout_rate > 0:
                mask = dropout_masks(params.dropout_rate, (len(idx), params.hidden_dim), rng)
            dW1, db1, dW2, db2 = _backprop(W1, b1, W2, b2, X[idx], Y[idx], G[idx], nce[idx], mask)
            W1 -= cfg.lr * dW1
            b1 -= cfg.lr * db1
            W2 -= cfg.lr * dW2
            b2 -= cfg.lr * db2
    if not all(np.all(np.isfinite(a)) for a in (W1, b1, W2, b2)):
        raise NumericError("training diverged (non-finite weights); lower the learning rate")
    return params.replace(W1, b1, W2, b2)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def train_supervised(params: ModelParams, X, labels, cfg: TrainConfig = TrainConfig()) -> ModelParams:
    Y = one_hot(labels, params.n_classes)
    return train(params, X, Y, np.ones_like(Y), None, cfg)


# -- temperature scaling -----------------------------------------------------


def temperature_nll(logits, labels, T: float) -> float:
    z = np.asarray(logits, dtype=np.float64) / T
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    return float(np.mean(lse - z[np.arange(z.shape[0]), labels]))


def temperature_grid() -> np.ndarray:
    ks = np.arange(0, 64)
    grid = 0.05 * 1.25 ** ks
    return grid[grid <= 20.0 + 1e-12]


def fit_temperature(logits, labels, golden_steps: int = 30) -> float:
    """Single-parameter temperature minimising the mean NLL.

    Coarse geometric grid on [0.05, 20], then golden-section refinement on
    the interval bracketing the best grid point.  The returned value is the
    best of every candidate evaluated (grid, refinement points and T=1).
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ShapeError(f"logits must be N x C with N labels, got {z.shape} and {y.shape}")
    n, c = z.shape
    if n < 10:
        raise CalibrationError(f"calibration fold too small for temperature fit (n={n}, need >= 10)")
    if not np.all(np.isfinite(z)):
        raise NumericError("logits must be finite")
    if y.dtype.kind not in "iu" or y.min() < 0 or y.max() >= c:
        raise InvalidArgumentError(f"labels must be integers in [0, {c})")
    if np.unique(y).size < 2:
        raise CalibrationError("temperature fit needs at least two distinct labels")

    cache: dict[float, float] = {}

    def nll(T: float) -> float:
        if T not in cache:
            cache[T] = temperature_nll(z, y, T)
        return cache[T]

    grid = temperature_grid()
    vals = [nll(float(t)) for t in grid]
    b = int(np.argmin(vals))
    lo = float(grid[max(b - 1, 0)])
    hi = float(grid[min(b + 1, len(grid) - 1)])

    invphi = (math.sqrt(5) - 1) / 2
    x1 = hi - invphi * (hi - lo)
    x2 = lo + invphi * (hi - lo)
    f1, f2 = nll(x1), nll(x2)
    for _ in range(golden_steps):
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - invphi * (hi - lo)
            f1 = nll(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + invphi * (hi - lo)
            f2 = nll(x2)
    nll(1.0)
    return min(cache, key=lambda t: (cache[t], t))
