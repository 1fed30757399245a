"""Pseudo-label construction and uncertainty-aware selection."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _rng
from .errors import InvalidArgumentError
from .model_core import ModelParams, _as_matrix, _logits, dropout_masks, softmax

LABEL_MODES = ("single", "multi")


@dataclass(frozen=True)
class SelectionConfig:
    kappa_p: float = 0.05
    kappa_n: float = 0.005
    tau_p: float = 0.7
    tau_n: float = 0.05
    gamma: float = 0.5
    mc_passes: int = 10
    label_mode: str = "single"

    def __post_init__(self):
        if not 0.0 < self.tau_p <= 1.0:
            raise InvalidArgumentError(f"tau_p must be in (0, 1], got {self.tau_p}")
        if not 0.0 <= self.tau_n < 1.0:
            raise InvalidArgumentError(f"tau_n must be in [0, 1), got {self.tau_n}")
        if not self.tau_n < self.tau_p:
            raise InvalidArgumentError("tau_n must be below tau_p")
        if self.kappa_n < 0 or self.kappa_p < 0:
            raise InvalidArgumentError("uncertainty thresholds must be non-negative")
        if self.kappa_n > self.kappa_p:
            raise InvalidArgumentError("kappa_n must not exceed kappa_p")
        if not 0.0 < self.gamma < 1.0:
            raise InvalidArgumentError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.mc_passes < 1:
            raise InvalidArgumentError(f"mc_passes must be >= 1, got {self.mc_passes}")
        if self.label_mode not in LABEL_MODES:
            raise InvalidArgumentError(f"label_mode must be one of {LABEL_MODES}, got {self.label_mode!r}")


@dataclass(frozen=True)
class PseudoLabelRecord:
    y_tilde: np.ndarray
    g: np.ndarray
    mean_probs: np.ndarray
    uncertainty: np.ndarray

    @property
    def s(self) -> int:
        return int(self.g.sum())

    @property
    def n_positive(self) -> int:
        return int((self.g * self.y_tilde).sum())

    @property
    def n_negative(self) -> int:
        return int((self.g * (1 - self.y_tilde)).sum())


def hard_pseudo_label(probs, gamma: float) -> np.ndarray:
    return (np.asarray(probs) >= gamma).astype(np.int8)


def set_pseudo_label_multi(pset, n_classes: int) -> np.ndarray:
    y = np.zeros(n_classes, dtype=np.int8)
    y[np.asarray(pset, dtype=np.int64)] = 1
    return y


def set_pseudo_label_single(pset, probs) -> np.ndarray:
    """One-hot on the most probable class, provided the set contains it."""
    members = np.asarray(pset, dtype=np.int64)
    if members.size == 0:
        raise InvalidArgumentError("prediction set is empty")
    p = np.asarray(probs)
    y = np.zeros(p.shape[0], dtype=np.int8)
    top = int(np.argmax(p))  # first index among ties
    if top in members:
        y[top] = 1
    return y


def select_mask(mean_probs, uncertainty, cfg: SelectionConfig) -> np.ndarray:
    p = np.asarray(mean_probs)
    u = np.asarray(uncertainty)
    if p.shape != u.shape:
        raise InvalidArgumentError(f"shape mismatch: probs {p.shape} vs uncertainty {u.shape}")
    pos = (u <= cfg.kappa_p) & (p >= cfg.tau_p)
    neg = (u <= cfg.kappa_n) & (p <= cfg.tau_n)
    return (pos | neg).astype(np.int8)


def mc_dropout_stats(params: ModelParams, x, passes: int, temperature: float = 1.0, seed: int = 0):
    """Mean probabilities and per-class std over stochastic forward passes.

    Returns ``(mean_probs, uncertainty)`` for a single feature vector; the
    std is the population std (zero for a single pass or no dropout).
    """
    if passes < 1:
        raise InvalidArgumentError(f"passes must be >= 1, got {passes}")
    X, _ = _as_matrix(params, x)
    if X.shape[0] != 1:
        raise InvalidArgumentError("mc_dropout_stats takes one sample; use mc_dropout_batch")
    if params.dropout_rate == 0.0 or passes == 1:
        # every pass is identical; report exact zeros rather than rounding noise
        rng = _rng.derive_rng(seed, _rng.MC_DROPOUT)
        mask = dropout_masks(params.dropout_rate, (1, params.hidden_dim), rng)
        p = softmax(_logits(params, X, mask), temperature)[0]
        return p / p.sum(), np.zeros_like(p)
    rng = _rng.derive_rng(seed, _rng.MC_DROPOUT)
    mask = dropout_masks(params.dropout_rate, (passes, params.hidden_dim), rng)
    P = softmax(_logits(params, np.repeat(X, passes, axis=0), mask), temperature)
    mean = P.mean(axis=0)
    return mean / mean.sum(), P.std(axis=0)


def mc_dropout_batch(
    params: ModelParams,
    X,
    passes: int,
    temperature: float = 1.0,
    seed: int = 0,
    threads: int = 1,
    offset: int = 0,
):
    """Row ``i`` equals ``mc_dropout_stats(params, X[i], ..., derive_seed(seed, offset + i))``.

    Per-row seeds make the result independent of ``threads``.
    """
    X, _ = _as_matrix(params, X)
    n = X.shape[0]
    seeds = [_rng.derive_seed(seed, offset + i) for i in range(n)]

    def one(i):
        return mc_dropout_stats(params, X[i], passes, temperature, seeds[i])

    if threads > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(n)))
    else:
        results = [one(i) for i in range(n)]
    if not results:
        c = params.n_classes
        return np.zeros((0, c)), np.zeros((0, c))
    return np.stack([r[0] for r in results]), np.stack([r[1] for r in results])


def build_record(pset, probs, mean_probs, uncertainty, cfg: SelectionConfig) -> PseudoLabelRecord:
    """Targets from the prediction set, mask from the MC statistics."""
    if cfg.label_mode == "multi":
        y = set_pseudo_label_multi(pset, len(probs))
    else:
        y = set_pseudo_label_single(pset, probs)
    g = select_mask(mean_probs, uncertainty, cfg)
    return PseudoLabelRecord(y, g, np.asarray(mean_probs), np.asarray(uncertainty))
