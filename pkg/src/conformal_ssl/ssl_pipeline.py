"""Self-training loop with RAPS prediction sets as the pseudo-labeler.

Each iteration calibrates the current network on a held-out labeled fold,
turns prediction sets on the unlabeled pool into pseudo-labels, keeps the
entries that are both confident and stable under MC-dropout, and trains a
freshly initialised network on labeled plus selected data.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import _rng
from .conformal import (
    ConformalCalibrator,
    ConformalConfig,
    calibrate,
    draw_u,
    empirical_coverage,
    mean_set_size,
    predict_sets,
)
from .data_io import Dataset, IterationReport, holdout_split
from .errors import InvalidArgumentError
from .model_core import (
    ModelParams,
    TrainConfig,
    fit_temperature,
    forward,
    init_params,
    one_hot,
    per_sample_losses,
    softmax,
    train,
)
from .pseudo_label import PseudoLabelRecord, SelectionConfig, build_record, mc_dropout_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SSLConfig:
    conformal: ConformalConfig = field(default_factory=ConformalConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    hidden_dim: int = 64
    dropout_rate: float = 0.1
    max_iterations: int = 10
    convergence_tol: float = 0.01
    calib_fraction: float = 0.2
    seed: int = 0
    calibrate_on_dtilde: bool = False
    uncertainty_raw: bool = False
    threads: int = 1

    def __post_init__(self):
        if not 0.0 < self.calib_fraction < 0.5:
            raise InvalidArgumentError(f"calib_fraction must be in (0, 0.5), got {self.calib_fraction}")
        if self.max_iterations < 1:
            raise InvalidArgumentError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.convergence_tol < 0:
            raise InvalidArgumentError("convergence_tol must be >= 0")
        if self.hidden_dim < 1:
            raise InvalidArgumentError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidArgumentError(f"dropout must be in [0, 1), got {self.dropout_rate}")
        if self.threads < 1:
            raise InvalidArgumentError(f"threads must be >= 1, got {self.threads}")

    def to_dict(self) -> dict:
        """Everything that influences results (``threads`` does not)."""
        d = dataclasses.asdict(self)
        d.pop("threads")
        return d


@dataclass
class PseudoLabelRound:
    probs: np.ndarray
    sets: list[np.ndarray]
    records: list[PseudoLabelRecord]

    @property
    def n_pos(self) -> int:
        return sum(r.n_positive for r in self.records)

    @property
    def n_neg(self) -> int:
        return sum(r.n_negative for r in self.records)

    @property
    def n_selected(self) -> int:
        return self.n_pos + self.n_neg

    def selected_rows(self) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.records) if r.s >= 1], dtype=np.int64)

    def selected_precision(self, truth) -> float | None:
        """Fraction of selected positive entries that name the true class."""
        hits = total = 0
        for r, t in zip(self.records, np.asarray(truth)):
            pos = np.flatnonzero(r.g * r.y_tilde)
            total += pos.size
            hits += int(np.sum(pos == t))
        return hits / total if total else None

    def argmax_precision(self, truth) -> float:
        """Accuracy of plain argmax pseudo-labels over the whole pool."""
        return float(np.mean(np.argmax(self.probs, axis=1) == np.asarray(truth)))


@dataclass
class SSLResult:
    params: ModelParams
    reports: list[IterationReport]
    calibrator: ConformalCalibrator | None
    history: list[int]
    last_round: PseudoLabelRound | None = None
    rounds: list[PseudoLabelRound] = field(default_factory=list)


def converged(history, tol: float) -> bool:
    if not history:
        raise InvalidArgumentError("history must be nonempty")
    if len(history) < 2:
        return False
    prev, cur = history[-2], history[-1]
    return abs(cur - prev) <= tol * max(1, prev)


def route_nce(Y, G, is_labeled) -> np.ndarray:
    """True for pseudo-labeled rows whose selections are all negatives."""
    Y = np.asarray(Y)
    G = np.asarray(G)
    has_pos = (G * Y).sum(axis=1) > 0
    return ~np.asarray(is_labeled, dtype=bool) & ~has_pos


def composite_loss(y_hat, Y, G, is_labeled) -> float:
    """Mean per-sample loss: full-mask BCE for labeled rows, masked BCE for
    pseudo rows with a selected positive, NCE for the rest."""
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    is_labeled = np.atleast_1d(np.asarray(is_labeled, dtype=bool))
    if Y.shape[0] == 0:
        raise InvalidArgumentError("empty batch")
    if np.any(G.sum(axis=1) < 1):
        raise AssertionError("sample with empty selection mask reached the loss")
    if np.any(is_labeled & (G.min(axis=1) < 1)):
        raise InvalidArgumentError("labeled rows must use the full mask")
    nce = route_nce(Y, G, is_labeled)
    return float(per_sample_losses(Y, np.atleast_2d(y_hat), G, nce).mean())


def fit_calibrator(params: ModelParams, X_cal, y_cal, cfg: ConformalConfig) -> ConformalCalibrator:
    """Temperature fit followed by RAPS threshold calibration."""
    logits = forward(params, X_cal)
    T = fit_temperature(logits, np.asarray(y_cal))
    return calibrate(softmax(logits, T), y_cal, cfg, T)


def pseudo_label_round(
    params: ModelParams,
    X_unl,
    cal: ConformalCalibrator,
    sel: SelectionConfig,
    mc_seed: int,
    threads: int = 1,
    uncertainty_raw: bool = False,
) -> PseudoLabelRound:
    X_unl = np.asarray(X_unl, dtype=np.float64)
    T = cal.temperature
    probs = softmax(forward(params, X_unl), T)
    sets = predict_sets(probs, cal, draw_u(cal, X_unl.shape[0]))
    mc_T = 1.0 if uncertainty_raw else T
    mean_p, unc = mc_dropout_batch(params, X_unl, sel.mc_passes, mc_T, mc_seed, threads)
    records = [build_record(sets[i], probs[i], mean_p[i], unc[i], sel) for i in range(len(sets))]
    return PseudoLabelRound(probs, sets, records)


def iteration_init(cfg: SSLConfig, n_features: int, n_classes: int, k: int) -> ModelParams:
    """The fresh network that iteration ``k`` starts from."""
    return init_params(
        n_features, n_classes, cfg.hidden_dim, cfg.dropout_rate,
        _rng.derive_seed(cfg.seed, _rng.INIT, k),
    )


def _train_cfg(cfg: SSLConfig, k: int) -> TrainConfig:
    return dataclasses.replace(cfg.train, seed=_rng.derive_seed(cfg.seed, _rng.TRAIN, k))


def labeled_folds(cfg: SSLConfig, labels, k: int) -> tuple[np.ndarray, np.ndarray]:
    """(train, calib) index arrays into the labeled set for iteration ``k``."""
    if cfg.calibrate_on_dtilde:
        idx = np.arange(len(labels))
        return idx, idx
    return holdout_split(labels, cfg.calib_fraction, cfg.seed, key=k)


def _check_labeled(labeled: Dataset) -> None:
    if np.any(labeled.labels < 0):
        raise InvalidArgumentError("labeled set contains unlabeled rows")
    if np.unique(labeled.labels).size < 2:
        raise InvalidArgumentError("labeled set needs at least two classes")


def train_baseline(labeled: Dataset, cfg: SSLConfig) -> ModelParams:
    """Supervised-only model: the iteration-0 network of :func:`run`."""
    _check_labeled(labeled)
    tr, _ = labeled_folds(cfg, labeled.labels, 0)
    p0 = iteration_init(cfg, labeled.n_features, labeled.n_classes, 0)
    Y = one_hot(labeled.labels[tr], labeled.n_classes)
    return train(p0, labeled.features[tr], Y, np.ones_like(Y), None, _train_cfg(cfg, 0))


def accuracy(params: ModelParams, ds: Dataset | None) -> float:
    if ds is None or len(ds) == 0:
        return float("nan")
    return float(np.mean(np.argmax(forward(params, ds.features), axis=1) == ds.labels))


def run(
    labeled: Dataset,
    unlabeled: Dataset,
    cfg: SSLConfig = SSLConfig(),
    test: Dataset | None = None,
    truth=None,
    keep_rounds: bool = False,
) -> SSLResult:
    """Iterative pseudo-labeling with network re-initialisation each round.

    Parameters
    ----------
    labeled : Dataset
        Rows with known labels; split internally into train and calibration folds.
    unlabeled : Dataset
        Pool to pseudo-label. Its labels are never read.
    test : Dataset, optional
        Evaluation split for per-iteration accuracy.
    truth : array-like, optional
        True labels of the unlabeled pool, used only for precision reporting.
    keep_rounds : bool
        Keep every :class:`PseudoLabelRound` on the result (memory heavy).
    """
    _check_labeled(labeled)
    if len(unlabeled) == 0:
        raise InvalidArgumentError("unlabeled pool is empty")
    C, d = labeled.n_classes, labeled.n_features
    cfg.conformal.check_classes(C)
    X_L, y_L = labeled.features, labeled.labels
    X_U = unlabeled.features

    params = train_baseline(labeled, cfg)
    tr_idx, cal_idx = labeled_folds(cfg, y_L, 0)
    selected_X = np.zeros((0, d))
    selected_Y = np.zeros((0, C))
    selected_G = np.zeros((0, C))

    reports: list[IterationReport] = []
    history: list[int] = []
    rounds: list[PseudoLabelRound] = []
    cal = None
    for k in range(1, cfg.max_iterations + 1):
        X_cal, y_cal = X_L[cal_idx], y_L[cal_idx]
        if cfg.calibrate_on_dtilde and selected_X.shape[0]:
            # pseudo rows whose only positive target is a selected one
            pos = selected_G * selected_Y
            onehot = (selected_Y.sum(axis=1) == 1) & (pos.sum(axis=1) == 1)
            X_cal = np.vstack([X_cal, selected_X[onehot]])
            y_cal = np.concatenate([y_cal, np.argmax(selected_Y[onehot], axis=1)])
        conf_cfg = dataclasses.replace(cfg.conformal, seed=_rng.derive_seed(cfg.seed, _rng.CALIB_U, k))
        cal = fit_calibrator(params, X_cal, y_cal, conf_cfg)
        cal_probs = softmax(forward(params, X_L[cal_idx]), cal.temperature)
        cal_sets = predict_sets(cal_probs, cal, draw_u(cal, len(cal_idx), offset=1 << 32))
        coverage = empirical_coverage(cal_sets, y_L[cal_idx])

        rnd = pseudo_label_round(
            params, X_U, cal, cfg.selection,
            _rng.derive_seed(cfg.seed, _rng.MC_DROPOUT, k), cfg.threads, cfg.uncertainty_raw,
        )
        if keep_rounds:
            rounds.append(rnd)
        sel = rnd.selected_rows()
        selected_X = X_U[sel]
        selected_Y = np.array([rnd.records[i].y_tilde for i in sel], dtype=np.float64).reshape(-1, C)
        selected_G = np.array([rnd.records[i].g for i in sel], dtype=np.float64).reshape(-1, C)

        tr_idx, cal_idx = labeled_folds(cfg, y_L, k)
        Y_lab = one_hot(y_L[tr_idx], C)
        X_all = np.vstack([X_L[tr_idx], selected_X])
        Y_all = np.vstack([Y_lab, selected_Y])
        G_all = np.vstack([np.ones_like(Y_lab), selected_G])
        is_lab = np.concatenate([np.ones(len(tr_idx), bool), np.zeros(len(sel), bool)])
        params = train(
            iteration_init(cfg, d, C, k), X_all, Y_all, G_all,
            route_nce(Y_all, G_all, is_lab), _train_cfg(cfg, k),
        )

        report = IterationReport(
            iter=k,
            n_pos=rnd.n_pos,
            n_neg=rnd.n_neg,
            mean_set_size=mean_set_size(rnd.sets),
            coverage=coverage,
            test_acc=accuracy(params, test),
            selected_precision=None if truth is None else rnd.selected_precision(truth),
        )
        reports.append(report)
        history.append(rnd.n_selected)
        log.info(
            "iter %d: pos=%d neg=%d set=%.2f cov=%.3f acc=%.4f",
            k, report.n_pos, report.n_neg, report.mean_set_size, coverage, report.test_acc,
        )
        if converged(history, cfg.convergence_tol):
            break
    return SSLResult(params, reports, cal, history, rnd, rounds)
