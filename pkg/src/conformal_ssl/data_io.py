"""Datasets: CSV ingestion, synthetic generators, splitting, serialization."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _rng
from .errors import InvalidArgumentError, ParseError, SplitError

SPLIT_TAGS = ("train", "calib", "unlabeled", "test")
UNLABELED = -1


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus integer labels (-1 marks an unlabeled row)."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    split_tags: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise InvalidArgumentError(f"features {X.shape} and labels {y.shape} do not align")
        if not np.all(np.isfinite(X)):
            raise InvalidArgumentError("features must be finite")
        bad = (y != UNLABELED) & ((y < 0) | (y >= self.n_classes))
        if bad.any():
            raise InvalidArgumentError(
                f"label {int(y[bad][0])} out of range for {self.n_classes} classes"
            )
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        if self.split_tags is not None:
            tags = np.asarray(self.split_tags, dtype=object)
            if tags.shape != y.shape or not set(tags.tolist()) <= set(SPLIT_TAGS):
                raise InvalidArgumentError(f"split tags must be one of {SPLIT_TAGS}")
            object.__setattr__(self, "split_tags", tags)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        tags = None if self.split_tags is None else self.split_tags[idx]
        return Dataset(self.features[idx], self.labels[idx], self.n_classes, tags)

    def tagged(self, tag: str) -> "Dataset":
        if self.split_tags is None:
            raise InvalidArgumentError("dataset has no split tags")
        return self.subset(np.flatnonzero(self.split_tags == tag))


@dataclass(frozen=True)
class TruthLedger:
    """True labels of rows whose labels were masked, for evaluation only."""

    row_index: np.ndarray
    labels: np.ndarray


@dataclass
class IterationReport:
    iter: int
    n_pos: int
    n_neg: int
    mean_set_size: float
    coverage: float
    test_acc: float
    selected_precision: float | None = None


@dataclass
class RunMetrics:
    config: dict
    iterations: list[IterationReport] = field(default_factory=list)
    final_test_acc: float = float("nan")
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "iterations": [asdict(r) for r in self.iterations],
            "final_test_acc": self.final_test_acc,
            "seconds": self.seconds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunMetrics":
        return cls(
            config=d["config"],
            iterations=[IterationReport(**r) for r in d["iterations"]],
            final_test_acc=d["final_test_acc"],
            seconds=d["seconds"],
        )


# -- CSV ---------------------------------------------------------------------


def load_csv(path, n_classes: int | None = None) -> Dataset:
    """Read ``f0..f{d-1}``, ``label`` and optional ``split`` columns."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ParseError(f"{path}: missing header row")
        header = [h.strip() for h in header]
        fcols = sorted(
            (i for i, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()),
            key=lambda i: int(header[i][1:]),
        )
        if [header[i] for i in fcols] != [f"f{k}" for k in range(len(fcols))] or not fcols:
            raise ParseError(f"{path}: header needs contiguous feature columns f0..f{{d-1}}")
        if "label" not in header:
            raise ParseError(f"{path}: header has no 'label' column")
        lcol = header.index("label")
        scol = header.index("split") if "split" in header else None

        feats, labels, tags = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                feats.append([float(row[i]) for i in fcols])
                labels.append(int(row[lcol]))
            except ValueError as exc:
                raise ParseError(f"{path}: row {lineno}: non-numeric cell ({exc})") from exc
            if scol is not None:
                tag = row[scol].strip()
                if tag not in SPLIT_TAGS:
                    raise ParseError(f"{path}: row {lineno}: unknown split tag {tag!r}")
                tags.append(tag)

    if not labels:
        raise ParseError(f"{path}: no data rows")
    y = np.array(labels, dtype=np.int64)
    if np.any(y < UNLABELED):
        raise ParseError(f"{path}: labels must be >= -1")
    inferred = int(y.max()) + 1
    if n_classes is None:
        n_classes = max(inferred, 2)
    elif inferred > n_classes:
        raise InvalidArgumentError(f"{path}: label {inferred - 1} out of range for --classes {n_classes}")
    X = np.array(feats, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ParseError(f"{path}: non-finite feature value")
    return Dataset(X, y, n_classes, np.array(tags, dtype=object) if scol is not None else None)


def write_csv(ds: Dataset, path) -> None:
    path = Path(path)
    d = ds.n_features
    with _open_for_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = [f"f{k}" for k in range(d)] + ["label"]
        if ds.split_tags is not None:
            header.append("split")
        w.writerow(header)
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.features[i]] + [int(ds.labels[i])]
            if ds.split_tags is not None:
                row.append(ds.split_tags[i])
            w.writerow(row)


def _open_for_write(path: Path):
    try:
        return path.open("w", newline="")
    except OSError as exc:
        raise ParseError(f"{path}: cannot write ({exc.strerror})") from exc


# -- generators --------------------------------------------------------------


def blob_centers(n_classes: int, n_features: int, radius: float = 3.0) -> np.ndarray:
    """Class centres evenly spaced on a circle in the first two coordinates."""
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    centers = np.zeros((n_classes, n_features))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def gen_blobs(n: int, n_classes: int, n_features: int = 2, cluster_std: float = 1.0, seed: int = 0) -> Dataset:
    if n < n_classes or n_classes < 2:
        raise InvalidArgumentError(f"need n >= classes >= 2, got n={n}, classes={n_classes}")
    if n_features < 2:
        raise InvalidArgumentError(f"need at least 2 features, got {n_features}")
    if cluster_std < 0:
        raise InvalidArgumentError("cluster_std must be >= 0")
    rng = _rng.derive_rng(seed, _rng.DATA)
    y = rng.permutation(np.arange(n) % n_classes)
    X = blob_centers(n_classes, n_features)[y] + cluster_std * rng.standard_normal((n, n_features))
    return Dataset(X, y, n_classes)


def gen_moons(n: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaving half circles (class 0 on top, class 1 below)."""
    if n < 2:
        raise InvalidArgumentError(f"need n >= 2, got {n}")
    rng = _rng.derive_rng(seed, _rng.DATA)
    n0 = (n + 1) // 2
    n1 = n - n0
    t0 = np.linspace(0, np.pi, n0)
    t1 = np.linspace(0, np.pi, n1)
    X = np.vstack([
        np.column_stack([np.cos(t0), np.sin(t0)]),
        np.column_stack([1 - np.cos(t1), 0.5 - np.sin(t1)]),
    ])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    X = X + noise * rng.standard_normal(X.shape)
    perm = rng.permutation(n)
    return Dataset(X[perm], y[perm], 2)


# -- splitting ---------------------------------------------------------------


def split(ds: Dataset, fractions, seed: int = 0) -> tuple[Dataset, TruthLedger]:
    """Tag rows ``train`` / ``unlabeled`` / ``test``, stratified by class.

    Returns the working copy (unlabeled labels masked to -1) and the ledger of
    masked truth.
    """
    f_lab, f_unl, f_test = (float(f) for f in fractions)
    if min(f_lab, f_unl, f_test) < 0 or abs(f_lab + f_unl + f_test - 1.0) > 1e-9:
        raise InvalidArgumentError(f"split fractions must be >= 0 and sum to 1, got {fractions}")
    if np.any(ds.labels == UNLABELED):
        raise InvalidArgumentError("split needs a fully labeled dataset")
    rng = _rng.derive_rng(seed, _rng.SPLIT)
    tags = np.empty(len(ds), dtype=object)
    for c in range(ds.n_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        m = idx.size
        n_lab = int(round(f_lab * m))
        n_test = min(int(round(f_test * m)), m - n_lab)
        if n_lab == 0:
            raise SplitError(f"class {c} has no labeled samples after split")
        tags[idx[:n_lab]] = "train"
        tags[idx[n_lab:n_lab + n_test]] = "test"
        tags[idx[n_lab + n_test:]] = "unlabeled"
    unl = np.flatnonzero(tags == "unlabeled")
    labels = ds.labels.copy()
    truth = TruthLedger(unl, labels[unl].copy())
    labels[unl] = UNLABELED
    return Dataset(ds.features, labels, ds.n_classes, tags), truth


def holdout_split(labels, fraction: float, seed: int, key: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stratified (train_idx, calib_idx) partition of a labeled set."""
    labels = np.asarray(labels)
    rng = _rng.derive_rng(seed, _rng.SPLIT, key)
    train_idx, calib_idx = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(fraction * idx.size))
        calib_idx.append(idx[:k])
        train_idx.append(idx[k:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(calib_idx))


# -- metrics / sets ----------------------------------------------------------


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def write_metrics(metrics: RunMetrics, path) -> None:
    d = metrics.to_dict()
    d["final_test_acc"] = _json_safe(d["final_test_acc"])
    with _open_for_write(Path(path)) as fh:
        json.dump(d, fh, indent=2, sort_keys=False)
        fh.write("\n")


def read_metrics(path) -> RunMetrics:
    try:
        with Path(path).open() as fh:
            d = json.load(fh)
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if d.get("final_test_acc") is None:
        d["final_test_acc"] = float("nan")
    return RunMetrics.from_dict(d)


def format_set_row(sample_id: int, members, y_tilde, g) -> str:
    joined = ";".join(str(int(c)) for c in sorted(int(c) for c in members))
    bits = lambda v: "".join(str(int(b)) for b in v)  # noqa: E731
    return f"{sample_id},{joined},{bits(y_tilde)},{bits(g)}"


def write_sets(rows, path) -> None:
    """``rows`` yields ``(sample_id, members, y_tilde, g)`` tuples."""
    with _open_for_write(Path(path)) as fh:
        fh.write("sample_id,set_members,y_tilde,g\n")
        for r in rows:
            fh.write(format_set_row(*r) + "\n")


def read_sets(path) -> list[tuple[int, list[int], list[int], list[int]]]:
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for sid, members, y, g in reader:
            out.append((
                int(sid),
                [int(c) for c in members.split(";") if c],
                [int(b) for b in y],
                [int(b) for b in g],
            ))
    return out


# -- model persistence -------------------------------------------------------


def save_model(path, params, calibrator=None) -> None:
    """Weights plus optional calibration state in one ``.npz`` file."""
    meta = {"dropout_rate": params.dropout_rate, "seed": params.seed}
    if calibrator is not None:
        meta["calibrator"] = {
            "config": asdict(calibrator.config),
            "tau_hat": calibrator.tau_hat,
            "temperature": calibrator.temperature,
            "n_calib": calibrator.n_calib,
        }
    try:
        with Path(path).open("wb") as fh:
            np.savez(fh, W1=params.W1, b1=params.b1, W2=params.W2, b2=params.b2,
                     meta=np.array(json.dumps(meta)))
    except OSError as exc:
        raise ParseError(f"{path}: cannot write ({exc.strerror})") from exc


def load_model(path):
    """Inverse of :func:`save_model`: ``(ModelParams, ConformalCalibrator | None)``."""
    from .conformal import ConformalCalibrator, ConformalConfig
    from .model_core import ModelParams

    try:
        with np.load(Path(path), allow_pickle=False) as z:
            arrays = {k: z[k] for k in ("W1", "b1", "W2", "b2")}
            meta = json.loads(str(z["meta"]))
    except (OSError, KeyError, ValueError) as exc:
        raise ParseError(f"{path}: not a saved model ({exc})") from exc
    params = ModelParams(**arrays, dropout_rate=meta["dropout_rate"], seed=meta["seed"])
    cal = None
    if "calibrator" in meta:
        c = meta["calibrator"]
        cal = ConformalCalibrator(ConformalConfig(**c["config"]), c["tau_hat"], c["temperature"], c["n_calib"])
    return params, cal
