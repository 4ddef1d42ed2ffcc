"""Dataset ingestion, preprocessing, splits, error metrics and synthesis."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .kernels import Lengthscales, kernel_matrix


class DataFormatError(ValueError):
    """Malformed input file; carries the offending line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateMetricError(ValueError):
    """Metric undefined for these targets (e.g. NRMSE with zero-mean y)."""


class Task(str, Enum):
    REGRESSION = "regression"
    BINARY = "binary"
    MULTICLASS = "multiclass"


class FileFormat(str, Enum):
    DELIMITED = "delimited"
    SPARSE_INDEX_VALUE = "sparse"


class MetricKind(str, Enum):
    RMSE = "rmse"
    NRMSE = "nrmse"
    CERROR = "c-error"
    AUC = "auc"


@dataclass(frozen=True)
class MetricValue:
    kind: MetricKind
    value: float


@dataclass(frozen=True)
class Split:
    """Disjoint row-index sets; any of them may be empty."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "val", "test"):
            arr = np.asarray(getattr(self, name), dtype=np.intp)
            object.__setattr__(self, name, arr)
        allidx = np.concatenate([self.train, self.val, self.test])
        if allidx.size != np.unique(allidx).size:
            raise ValueError("split index sets must be disjoint")

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("train", "val", "test")}


@dataclass(frozen=True)
class Dataset:
    """Design matrix X (n, d) and targets Y (n, o), with optional split.

    ``preprocessing`` records the statistics applied (feature means/stds,
    label mean/std or class map) so a run can be reproduced exactly.
    """

    X: np.ndarray
    Y: np.ndarray
    split: Split | None = None
    task: Task | None = None
    preprocessing: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        Y = np.asarray(self.Y, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
            raise ValueError("X must be (n, d) and Y (n, o) with matching n")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("dataset contains NaN or Inf")
        if self.split is not None:
            hi = max((arr.max(initial=-1) for arr in
                      (self.split.train, self.split.val, self.split.test)))
            if hi >= X.shape[0]:
                raise ValueError("split index out of range")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def o(self) -> int:
        return self.Y.shape[1]

    def subset(self, idx) -> "Dataset":
        """Rows ``idx`` as a new split-free Dataset."""
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.X[idx], self.Y[idx], None, self.task,
                       self.preprocessing)

    def train_part(self) -> "Dataset":
        if self.split is None:
            return self
        return self.subset(self.split.train)

    def val_part(self) -> "Dataset":
        if self.split is None or self.split.val.size == 0:
            raise ValueError("dataset has no validation part")
        return self.subset(self.split.val)

    def test_part(self) -> "Dataset | None":
        if self.split is None or self.split.test.size == 0:
            return None
        return self.subset(self.split.test)

    def tuning_part(self) -> "Dataset":
        """Everything except the test rows, in original row order."""
        if self.split is None:
            return self
        idx = np.sort(np.concatenate([self.split.train, self.split.val]))
        return self.subset(idx)

    def with_split(self, split: Split) -> "Dataset":
        return replace(self, split=split)

    def fingerprint(self) -> dict:
        h = hashlib.sha256()
        h.update(self.X.tobytes())
        h.update(self.Y.tobytes())
        return {"n": self.n, "d": self.d, "o": self.o,
                "sha256": h.hexdigest()}


# ---------------------------------------------------------------------------
# Loading and writing


def _label_column_indices(label_cols, width: int):
    if label_cols in ("last", None):
        return [width - 1]
    if label_cols == "first":
        return [0]
    if isinstance(label_cols, int):
        return [label_cols]
    return list(label_cols)


def load_dataset(path, fmt: FileFormat = FileFormat.DELIMITED, *,
                 delimiter: str = ",", label_cols="last",
                 n_features: int | None = None) -> Dataset:
    """Load a dense delimited file or a sparse ``label idx:val`` file.

    The sparse format uses 1-based feature indices and zero-fills missing
    entries; ``n_features`` fixes the dimension (otherwise the maximum
    observed index is used).
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    if fmt == FileFormat.DELIMITED:
        rows = []
        width = None
        for i, ln in enumerate(lines, start=1):
            parts = [p for p in ln.split(delimiter)]
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise DataFormatError(f"unparsable value ({exc})", line=i)
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise DataFormatError(
                    f"expected {width} columns, got {len(vals)}", line=i)
            rows.append(vals)
        table = np.asarray(rows)
        labels = _label_column_indices(label_cols, width)
        feat = [j for j in range(width) if j not in labels]
        if not feat:
            raise DataFormatError(f"{path}: no feature columns left")
        return Dataset(table[:, feat], table[:, labels])
    # sparse index:value
    ys, entries, max_idx = [], [], 0
    for i, ln in enumerate(lines, start=1):
        parts = ln.split()
        try:
            ys.append(float(parts[0]))
        except (IndexError, ValueError):
            raise DataFormatError("missing or unparsable label", line=i)
        row = {}
        for tok in parts[1:]:
            try:
                idx_s, val_s = tok.split(":")
                idx, val = int(idx_s), float(val_s)
            except ValueError:
                raise DataFormatError(f"bad index:value token {tok!r}", line=i)
            if idx < 1:
                raise DataFormatError(f"feature index {idx} is not 1-based",
                                      line=i)
            row[idx - 1] = val
            max_idx = max(max_idx, idx)
        entries.append(row)
    d = n_features if n_features is not None else max_idx
    if d < 1:
        raise DataFormatError(f"{path}: no features found")
    X = np.zeros((len(entries), d))
    for r, row in enumerate(entries):
        for j, val in row.items():
            if j >= d:
                raise DataFormatError(
                    f"feature index {j + 1} exceeds n_features={d}", line=r + 1)
            X[r, j] = val
    return Dataset(X, np.asarray(ys))


def save_delimited(path, ds: Dataset, *, delimiter: str = ",") -> None:
    """Write features followed by label column(s), full float precision."""
    table = np.hstack([ds.X, ds.Y])
    with open(path, "w", encoding="utf-8") as fh:
        for row in table:
            fh.write(delimiter.join(repr(float(v)) for v in row))
            fh.write("\n")


# ---------------------------------------------------------------------------
# Preprocessing and splits


def make_split(n: int, fractions: dict, seed: int) -> Split:
    """Random disjoint split; fractions are {'train':., 'val':., 'test':.}."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_test = int(round(fractions.get("test", 0.0) * n))
    n_val = int(round(fractions.get("val", 0.0) * n))
    test = perm[:n_test]
    val = perm[n_test:n_test + n_val]
    train = perm[n_test + n_val:]
    return Split(np.sort(train), np.sort(val), np.sort(test))


def preprocess(ds: Dataset, task: Task, seed: int = 0,
               split_spec=None) -> Dataset:
    """Standardize features (train statistics only) and encode labels.

    Regression labels are standardized; binary labels are mapped to -1/+1;
    multiclass labels are one-hot encoded.  Zero-variance features are
    dropped and recorded.  ``split_spec`` is either a fraction dict passed
    to :func:`make_split` or an explicit :class:`Split`.
    """
    task = Task(task)
    if isinstance(split_spec, Split):
        split = split_spec
    elif split_spec is not None:
        split = make_split(ds.n, split_spec, seed)
    else:
        split = ds.split
    train_idx = split.train if split is not None else np.arange(ds.n)
    if train_idx.size == 0:
        raise ValueError("empty training portion")
    record: dict = {"task": task.value, "seed": seed}

    Xtr = ds.X[train_idx]
    mean = Xtr.mean(axis=0)
    std = Xtr.std(axis=0)
    keep = std > 1e-12
    dropped = np.nonzero(~keep)[0]
    if dropped.size:
        record["dropped_features"] = dropped.tolist()
        record["warning"] = f"dropped {dropped.size} zero-variance feature(s)"
    mean, std = mean[keep], std[keep]
    X = (ds.X[:, keep] - mean) / std
    record["feature_mean"] = mean.tolist()
    record["feature_std"] = std.tolist()

    Y = ds.Y
    if task == Task.REGRESSION:
        ymean = Y[train_idx].mean(axis=0)
        ystd = Y[train_idx].std(axis=0)
        if np.any(ystd <= 1e-12):
            raise ValueError("constant regression labels")
        Y = (Y - ymean) / ystd
        record["label_mean"] = ymean.tolist()
        record["label_std"] = ystd.tolist()
    elif task == Task.BINARY:
        classes = np.unique(Y)
        if classes.size == 1 and classes[0] in (-1.0, 1.0):
            classes = np.array([-1.0, 1.0])
        if classes.size != 2:
            raise ValueError(f"binary task needs 2 classes, got {classes.size}")
        Y = np.where(np.isclose(Y, classes[0]), -1.0, 1.0)
        record["class_map"] = {repr(float(classes[0])): -1,
                               repr(float(classes[1])): 1}
    else:
        if ds.o != 1:
            raise ValueError("multiclass labels must be a single column")
        classes = np.unique(Y)
        if classes.size < 2:
            raise ValueError("single-class labels")
        onehot = np.zeros((ds.n, classes.size))
        for k, c in enumerate(classes):
            onehot[Y[:, 0] == c, k] = 1.0
        Y = onehot
        record["class_map"] = {repr(float(c)): k for k, c in enumerate(classes)}

    return Dataset(X, Y, split, task, record)


def save_preprocessing(path, ds: Dataset) -> None:
    Path(path).write_text(json.dumps(ds.preprocessing, indent=2, sort_keys=True),
                          encoding="utf-8")


# ---------------------------------------------------------------------------
# Metrics


def _auc_rank(scores: np.ndarray, positives: np.ndarray) -> float:
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    # average ranks over ties
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateMetricError("AUC needs both classes present")
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def metric(kind: MetricKind, predictions, targets) -> MetricValue:
    """Evaluate one error metric; shapes of predictions/targets must match.

    c-error uses the sign for single-column (-1/+1) targets and the row
    argmax for one-hot targets; AUC ranks scores with tie averaging.
    """
    kind = MetricKind(kind)
    P = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    T = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if P.shape[0] == 1 and T.shape[0] > 1:
        P = P.T
    if T.shape[0] == 1 and P.shape[0] > 1:
        T = T.T
    if P.shape != T.shape:
        raise ValueError(f"shape mismatch {P.shape} vs {T.shape}")
    n = P.shape[0]
    if kind == MetricKind.RMSE:
        return MetricValue(kind, float(np.sqrt(np.sum((P - T) ** 2) / n)))
    if kind == MetricKind.NRMSE:
        if T.shape[1] != 1:
            raise ValueError("NRMSE is defined for single-output targets")
        denom = float(T.mean())
        if abs(denom) < 1e-12:
            raise DegenerateMetricError("NRMSE denominator (mean target) is zero")
        rmse = float(np.sqrt(np.mean((P - T) ** 2)))
        return MetricValue(kind, abs(rmse / denom))
    if kind == MetricKind.CERROR:
        if T.shape[1] == 1:
            wrong = np.sign(P[:, 0]) * np.sign(T[:, 0]) <= 0
        else:
            wrong = P.argmax(axis=1) != T.argmax(axis=1)
        return MetricValue(kind, float(wrong.mean()))
    if T.shape[1] != 1:
        raise ValueError("AUC is defined for single-output scores")
    return MetricValue(kind, _auc_rank(P[:, 0], T[:, 0] > 0))


def default_metric_kind(task: Task | None) -> MetricKind:
    if task == Task.REGRESSION or task is None:
        return MetricKind.NRMSE
    return MetricKind.CERROR


# ---------------------------------------------------------------------------
# Synthetic data (fixed design, known target function)


@dataclass(frozen=True)
class SyntheticInfo:
    f_star: np.ndarray        # noiseless target values, (n, 1)
    sigma: float
    bayes_error: float | None # binary tasks only


def _gauss_cdf(x):
    from math import erf
    return 0.5 * (1.0 + np.vectorize(erf)(np.asarray(x) / np.sqrt(2.0)))


def binary_bayes_error(f_star: np.ndarray, sigma: float) -> float:
    """Error of the optimal classifier when y = sign(f*(x) + eps)."""
    return float(np.mean(_gauss_cdf(-np.abs(f_star) / sigma)))


def sigma_for_bayes_error(f_star: np.ndarray, target: float) -> float:
    """Bisection for the noise level giving a desired Bayes error."""
    lo, hi = 1e-6, 1e6
    for _ in range(200):
        mid = np.sqrt(lo * hi)
        if binary_bayes_error(f_star, mid) < target:
            lo = mid
        else:
            hi = mid
    return float(np.sqrt(lo * hi))


def make_synthetic(n: int, d: int, *, sigma: float | None = 0.1,
                   task: Task = Task.REGRESSION, seed: int = 0,
                   m_star: int = 12, split_fractions=None,
                   bayes_error: float | None = None):
    """Fixed-design dataset with a known random kernel-expansion target.

    f* is a random combination of ``m_star`` kernel bumps, rescaled to unit
    standard deviation over the design, so ``sigma`` is directly the
    noise-to-signal level.  For binary tasks the labels are
    sign(f* + noise); passing ``bayes_error`` picks sigma to match it.

    Returns ``(Dataset, SyntheticInfo)``.
    """
    task = Task(task)
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    centers = rng.normal(size=(m_star, d))
    weights = rng.normal(size=(m_star, 1))
    ls = Lengthscales.from_value(np.sqrt(d), d)
    f = kernel_matrix(X, centers, ls) @ weights
    f = (f - f.mean()) / f.std()
    if task == Task.BINARY and bayes_error is not None:
        sigma = sigma_for_bayes_error(f, bayes_error)
    if sigma is None:
        raise ValueError("sigma (or bayes_error for binary) required")
    noise = sigma * rng.normal(size=f.shape)
    if task == Task.BINARY:
        Y = np.where(f + noise >= 0, 1.0, -1.0)
        info = SyntheticInfo(f, float(sigma), binary_bayes_error(f, sigma))
    elif task == Task.REGRESSION:
        Y = f + noise
        info = SyntheticInfo(f, float(sigma), None)
    else:
        raise ValueError("synthetic generator supports regression and binary")
    split = (make_split(n, split_fractions, seed) if split_fractions else None)
    ds = Dataset(X, Y, split, task,
                 {"synthetic": True, "seed": seed, "sigma": float(sigma)})
    return ds, info
