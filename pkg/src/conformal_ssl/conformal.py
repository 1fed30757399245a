"""Regularized adaptive prediction sets (RAPS).

Scores are the sorted probability mass accumulated down to the true label,
plus a penalty ``lam * (rank - k_reg)^+`` that discourages long tails.  The
threshold is the split-conformal order statistic of calibration scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _rng
from .errors import CalibrationError, InvalidArgumentError, ShapeError

MIN_CALIB = 10


@dataclass(frozen=True)
class ConformalConfig:
    alpha: float = 0.1
    lam: float = 0.1
    k_reg: int = 2
    randomized: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InvalidArgumentError(f"alpha must be in (0, 1), got {self.alpha}")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise InvalidArgumentError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.k_reg < 1:
            raise InvalidArgumentError(f"k_reg must be >= 1, got {self.k_reg}")

    def check_classes(self, n_classes: int) -> None:
        if self.k_reg > n_classes:
            raise InvalidArgumentError(f"k_reg={self.k_reg} exceeds class count {n_classes}")


@dataclass(frozen=True)
class RankedProbs:
    order: np.ndarray
    cum_mass: np.ndarray
    sorted_probs: np.ndarray

    def rank_of(self, label: int) -> int:
        """1-based rank of ``label``."""
        return int(np.flatnonzero(self.order == label)[0]) + 1


@dataclass(frozen=True)
class ConformalCalibrator:
    config: ConformalConfig
    tau_hat: float
    temperature: float
    n_calib: int


def _as_rows(probs) -> tuple[np.ndarray, bool]:
    P = np.asarray(probs, dtype=np.float64)
    single = P.ndim == 1
    if single:
        P = P[None, :]
    if P.ndim != 2 or P.shape[1] < 1:
        raise ShapeError(f"probabilities must be a vector or N x C matrix, got shape {np.shape(probs)}")
    return P, single


def _sort_desc(P: np.ndarray) -> np.ndarray:
    # stable sort on -p keeps ascending class index among ties
    return np.argsort(-P, axis=1, kind="stable")


def rank(probs) -> RankedProbs:
    """Descending stable sort of one probability row."""
    P, _ = _as_rows(probs)
    order = _sort_desc(P)[0]
    sp = P[0, order]
    return RankedProbs(order, np.cumsum(sp), sp)


def _exclusive(cum: np.ndarray) -> np.ndarray:
    # mass strictly above each rank; avoids the rounding of cum - p
    return np.concatenate([np.zeros((cum.shape[0], 1)), cum[:, :-1]], axis=1)


def _penalty(ranks, cfg: ConformalConfig) -> np.ndarray:
    return cfg.lam * np.maximum(np.asarray(ranks) - cfg.k_reg, 0)


def conformal_scores(probs, labels, cfg: ConformalConfig, u=None) -> np.ndarray:
    """Vectorised conformal score for each (row, label).

    ``u`` of ``None`` gives the deterministic score (mass through the label's
    rank inclusive); otherwise ``rho + u * p_label`` where ``rho`` is the mass
    of strictly higher-ranked classes.
    """
    P, _ = _as_rows(probs)
    n, c = P.shape
    labels = np.asarray(labels).reshape(-1)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got {labels.shape[0]}")
    if labels.dtype.kind not in "iu" or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise InvalidArgumentError(f"labels must be integers in [0, {c})")
    order = _sort_desc(P)
    sp = np.take_along_axis(P, order, axis=1)
    cum = np.cumsum(sp, axis=1)
    pos = np.argmax(order == labels[:, None], axis=1)  # 0-based rank
    pen = _penalty(pos + 1, cfg)
    rows = np.arange(n)
    if u is None:
        return cum[rows, pos] + pen
    u = np.broadcast_to(np.asarray(u, dtype=np.float64), (n,))
    if np.any((u < 0) | (u > 1)) or not np.all(np.isfinite(u)):
        raise InvalidArgumentError("u must lie in [0, 1]")
    rho = _exclusive(cum)[rows, pos]
    return rho + u * sp[rows, pos] + pen


def conformal_score(probs, label: int, cfg: ConformalConfig, u: float | None = None) -> float:
    return float(conformal_scores(probs, [int(label)], cfg, None if u is None else [u])[0])


def conformal_quantile(scores, alpha: float) -> float:
    """The ceil((n+1)(1-alpha))-th smallest score, clipped to the maximum."""
    E = np.sort(np.asarray(scores, dtype=np.float64).reshape(-1))
    n = E.size
    if n == 0:
        raise CalibrationError("no calibration scores")
    # round away float noise such as 10 * 0.9 = 9.000000000000002
    k = math.ceil(round((n + 1) * (1.0 - alpha), 9))
    k = min(max(k, 1), n)
    return float(E[k - 1])


def uniform_draws(seed: int, stream: int, n: int, offset: int = 0) -> np.ndarray:
    """One U[0,1] draw per sample, keyed by (seed, stream, sample index)."""
    return np.array([_rng.derive_rng(seed, stream, offset + i).random() for i in range(n)])


def calibrate(probs, labels, cfg: ConformalConfig, temperature: float = 1.0) -> ConformalCalibrator:
    """Fit the RAPS threshold on a held-out calibration split.

    ``probs`` should already be temperature scaled; ``temperature`` is only
    recorded on the calibrator so prediction can reuse it.
    """
    P, _ = _as_rows(probs)
    n, c = P.shape
    if n < MIN_CALIB:
        raise CalibrationError(f"calibration fold too small (n_calib={n}, need >= {MIN_CALIB})")
    cfg.check_classes(c)
    u = uniform_draws(cfg.seed, _rng.CALIB_U, n) if cfg.randomized else None
    E = conformal_scores(P, labels, cfg, u)
    return ConformalCalibrator(cfg, conformal_quantile(E, cfg.alpha), float(temperature), n)


def predict_sets(probs, cal: ConformalCalibrator, u=None) -> list[np.ndarray]:
    """Prediction sets for a batch of rows.

    Deterministic mode returns the ``k*`` top classes, ``k*`` being the first
    rank whose penalised cumulative mass reaches the threshold (all classes if
    none does).  Randomized mode keeps every class whose randomized score is
    at most the threshold, with one ``u`` per row.  Empty sets become the
    top-1 class.  Each set lists class indices in rank order.
    """
    P, _ = _as_rows(probs)
    n, c = P.shape
    cfg = cal.config
    order = _sort_desc(P)
    sp = np.take_along_axis(P, order, axis=1)
    cum = np.cumsum(sp, axis=1)
    pen = _penalty(np.arange(1, c + 1), cfg)[None, :]
    tau = cal.tau_hat
    if not cfg.randomized:
        reached = cum + pen >= tau
        kstar = np.where(reached.any(axis=1), reached.argmax(axis=1) + 1, c)
        return [order[i, : kstar[i]] for i in range(n)]
    if u is None:
        raise InvalidArgumentError("randomized prediction needs u (see draw_u)")
    u = np.broadcast_to(np.asarray(u, dtype=np.float64), (n,))
    if np.any((u < 0) | (u > 1)):
        raise InvalidArgumentError("u must lie in [0, 1]")
    scores = _exclusive(cum) + u[:, None] * sp + pen
    keep = scores <= tau
    out = []
    for i in range(n):
        members = order[i, keep[i]]
        out.append(members if members.size else order[i, :1])
    return out


def draw_u(cal: ConformalCalibrator, n: int, offset: int = 0) -> np.ndarray | None:
    """Per-sample randomization for prediction, or ``None`` in deterministic mode."""
    if not cal.config.randomized:
        return None
    return uniform_draws(cal.config.seed, _rng.PREDICT_U, n, offset)


def predict_set(probs, cal: ConformalCalibrator, u: float | None = None) -> np.ndarray:
    """Single-row :func:`predict_sets`; randomized mode draws ``u`` if absent."""
    if cal.config.randomized and u is None:
        u = float(draw_u(cal, 1)[0])
    return predict_sets(probs, cal, None if u is None else [u])[0]


def empirical_coverage(sets, labels) -> float:
    labels = list(np.asarray(labels).reshape(-1))
    if len(sets) != len(labels):
        raise InvalidArgumentError(f"{len(sets)} sets but {len(labels)} labels")
    if not sets:
        raise InvalidArgumentError("coverage of an empty collection is undefined")
    hits = sum(int(y) in set(np.asarray(s).tolist()) for s, y in zip(sets, labels))
    return hits / len(sets)


def mean_set_size(sets) -> float:
    return float(np.mean([len(s) for s in sets])) if sets else 0.0
