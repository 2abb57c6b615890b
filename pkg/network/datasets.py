"""
Datasets - CSV/IDX ingestion, stratified splitting, normalization and
synthetic generators used as test oracles
"""
import gzip
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.datasets import load_breast_cancer, load_iris, load_wine
from sklearn.model_selection import train_test_split

from common.errors import FormatError, InvalidSpecError, SchemaError
from common.protocol import (IDX_PIXEL_MAX, unpack_idx_images_header,
                             unpack_idx_labels_header)

log = logging.getLogger("Datasets")


@dataclass
class Normalization:
    kind: str  # "zscore", "minmax" or "none"
    shift: np.ndarray
    scale: np.ndarray

    def apply(self, features):
        return (features - self.shift) / self.scale

    def to_dict(self):
        return {'kind': self.kind, 'shift': self.shift.tolist(), 'scale': self.scale.tolist()}


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    feature_names: List[str]
    class_names: List[str] = field(default_factory=list)
    normalization: Optional[Normalization] = None
    name: str = "dataset"
    dropped_rows: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise SchemaError("features must be (samples x n) and match labels")
        if np.isnan(self.features).any():
            raise SchemaError("Dataset contains missing values")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise SchemaError(f"Labels outside [0, {self.n_classes})")

    @property
    def n_features(self):
        return self.features.shape[1]

    def __len__(self):
        return len(self.labels)

    def subset(self, indices):
        return replace(self, features=self.features[indices], labels=self.labels[indices])


@dataclass
class DataSplit:
    train: Dataset
    test: Dataset


# ============================================================================
# CSV
# ============================================================================

def load_csv(path, label_column, categorical: Sequence[str] = (), drop: Sequence[str] = (),
             delimiter=",", name=None, na_values: Sequence[str] = ("?",)) -> Dataset:
    """
    Numeric columns as reals, declared categorical columns integer-encoded in
    first-appearance order, rows with missing cells (empty or "?") dropped,
    labels factorized.
    """
    try:
        frame = pd.read_csv(path, sep=delimiter, na_values=list(na_values))
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as e:
        raise FormatError(f"Cannot read {path}: {e}") from e
    return from_frame(frame, label_column, categorical, drop, name or Path(path).stem)


def from_frame(frame: pd.DataFrame, label_column, categorical: Sequence[str] = (),
               drop: Sequence[str] = (), name="dataset") -> Dataset:
    if label_column not in frame.columns:
        raise SchemaError(f"Label column {label_column!r} not found in {name}")
    frame = frame.drop(columns=[c for c in drop if c in frame.columns])

    before = len(frame)
    frame = frame.dropna(axis=0, how='any').reset_index(drop=True)
    dropped = before - len(frame)
    if dropped:
        log.info(f"Dropped {dropped} rows with missing values from {name}")
    if frame.empty:
        raise SchemaError(f"{name} is empty after dropping rows with missing values")

    labels, class_index = pd.factorize(frame[label_column], sort=False)
    feature_frame = frame.drop(columns=[label_column])
    columns = []
    for column in feature_frame.columns:
        series = feature_frame[column]
        if column in categorical:
            codes, _ = pd.factorize(series, sort=False)
            columns.append(codes.astype(np.float64))
        elif pd.api.types.is_numeric_dtype(series):
            columns.append(series.to_numpy(dtype=np.float64))
        else:
            raise SchemaError(f"Column {column!r} is not numeric and not declared categorical")

    return Dataset(features=np.column_stack(columns), labels=labels,
                   n_classes=len(class_index), feature_names=list(feature_frame.columns),
                   class_names=[str(c) for c in class_index],
                   name=name, dropped_rows=dropped)


_BUNDLED = {
    'iris': load_iris,
    'breast_cancer': load_breast_cancer,
    'wine': load_wine,
}


def load_bundled(kind, drop: Sequence[str] = (), name=None) -> Dataset:
    """Small datasets shipped with scikit-learn (no download)"""
    if kind not in _BUNDLED:
        raise InvalidSpecError(f"Unknown bundled dataset {kind!r}; choose from {sorted(_BUNDLED)}")
    bunch = _BUNDLED[kind](as_frame=True)
    frame = bunch.frame.copy()
    frame['target'] = [str(bunch.target_names[t]) for t in bunch.target]
    return from_frame(frame, 'target', drop=drop, name=name or kind)


# ============================================================================
# IDX
# ============================================================================

def _read_maybe_gzip(path):
    path = Path(path)
    if path.suffix == '.gz':
        with gzip.open(path, 'rb') as f:
            return f.read()
    return path.read_bytes()


def load_idx(images_path, labels_path, limit: Optional[int] = None, name="mnist") -> Dataset:
    """Pixels flattened and scaled to [0, 1]; big-endian header fields"""
    image_bytes = _read_maybe_gzip(images_path)
    label_bytes = _read_maybe_gzip(labels_path)

    count, rows, cols = unpack_idx_images_header(image_bytes)
    n_labels = unpack_idx_labels_header(label_bytes)
    if count != n_labels:
        raise FormatError(f"Image count {count} != label count {n_labels}")
    if len(image_bytes) < 16 + count * rows * cols:
        raise FormatError(f"Truncated image file {images_path}")
    if len(label_bytes) < 8 + count:
        raise FormatError(f"Truncated label file {labels_path}")

    n = count if limit is None else min(limit, count)
    pixels = np.frombuffer(image_bytes, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(label_bytes, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    features = pixels.reshape(n, rows * cols).astype(np.float64) / IDX_PIXEL_MAX
    log.info(f"{n} images loaded ({rows}x{cols})")
    return Dataset(features=features, labels=labels, n_classes=10,
                   feature_names=[f"px{i}" for i in range(rows * cols)],
                   class_names=[str(i) for i in range(10)], name=name)


# ============================================================================
# Splitting / Normalization
# ============================================================================

def fit_normalization(features, kind) -> Normalization:
    if kind == "zscore":
        shift = features.mean(axis=0)
        scale = features.std(axis=0)
    elif kind == "minmax":
        shift = features.min(axis=0)
        scale = features.max(axis=0) - shift
    elif kind == "none":
        shift = np.zeros(features.shape[1])
        scale = np.ones(features.shape[1])
    else:
        raise InvalidSpecError(f"Unknown normalization {kind!r}")
    scale = np.where(scale > 0, scale, 1.0)
    return Normalization(kind, shift, scale)


def split(data: Dataset, test_fraction=0.2, seed=0, normalization="zscore") -> DataSplit:
    """Stratified, seed-determined split; normalization statistics from train only"""
    if not 0.0 < test_fraction < 1.0:
        raise InvalidSpecError("test_fraction must lie in (0, 1)")
    counts = np.bincount(data.labels, minlength=data.n_classes)
    present = counts[counts > 0]
    if np.any(present < 2):
        raise SchemaError(f"Every class needs at least 2 samples for a stratified split: {counts}")

    train_idx, test_idx = train_test_split(np.arange(len(data)), test_size=test_fraction,
                                           random_state=seed, stratify=data.labels)
    train_idx, test_idx = np.sort(train_idx), np.sort(test_idx)
    norm = fit_normalization(data.features[train_idx], normalization)
    train = replace(data.subset(train_idx), features=norm.apply(data.features[train_idx]),
                    normalization=norm)
    test = replace(data.subset(test_idx), features=norm.apply(data.features[test_idx]),
                   normalization=norm)
    log.info(f"Split {data.name}: {len(train)} train / {len(test)} test ({normalization})")
    return DataSplit(train, test)


def stratified_sample(data: Dataset, size, seed=0) -> Dataset:
    """Deterministic class-proportional subsample (at most `size` rows)"""
    if len(data) <= size:
        return data
    try:
        idx, _ = train_test_split(np.arange(len(data)), train_size=size, random_state=seed,
                                  stratify=data.labels)
    except ValueError:
        idx = np.random.default_rng(seed).choice(len(data), size=size, replace=False)
    return data.subset(np.sort(idx))


def select_classes(data: Dataset, class_names: Sequence[str]) -> Dataset:
    """Keep only the named classes, relabelled 0..k-1 in the order given"""
    missing = [c for c in class_names if c not in data.class_names]
    if missing or len(set(class_names)) < 2:
        raise SchemaError(f"Need at least two distinct classes of {data.class_names}; unknown: {missing}")
    codes = [data.class_names.index(c) for c in class_names]
    keep = np.isin(data.labels, codes)
    relabel = np.full(data.n_classes, -1, dtype=np.int64)
    relabel[codes] = np.arange(len(codes))
    return replace(data, features=data.features[keep], labels=relabel[data.labels[keep]],
                   n_classes=len(codes), class_names=list(class_names))


# ============================================================================
# Synthetic Generators
# ============================================================================

def blobs(n_samples=200, n_features=2, margin=2.0, sigma=1.0, seed=0) -> Dataset:
    """Two Gaussian blobs pushed apart along feature 0 so they are separated by `margin`*sigma"""
    rng = np.random.default_rng(seed)
    labels = np.arange(n_samples) % 2
    X = rng.normal(0.0, sigma, size=(n_samples, n_features))
    side = np.where(labels == 1, 1.0, -1.0)
    X[:, 0] = side * (margin * sigma / 2.0 + np.abs(X[:, 0]))
    return Dataset(X, labels, 2, [f"x{i}" for i in range(n_features)], ["0", "1"], name="blobs")


def xor(n_samples=200, noise=0.1, seed=0) -> Dataset:
    rng = np.random.default_rng(seed)
    corners = rng.integers(0, 2, size=(n_samples, 2))
    X = corners * 2.0 - 1.0 + rng.normal(0.0, noise, size=(n_samples, 2))
    labels = corners[:, 0] ^ corners[:, 1]
    return Dataset(X, labels, 2, ["x0", "x1"], ["0", "1"], name="xor")


def logistic_map_series(n=2000, r=4.0, x0=0.2, discard=0):
    x = np.empty(n + discard)
    x[0] = x0
    for t in range(1, n + discard):
        x[t] = r * x[t - 1] * (1.0 - x[t - 1])
    return x[discard:]


def henon_series(n=5000, a=1.4, b=0.3, x0=0.1, y0=0.1, discard=100):
    """x-coordinate of the Henon map"""
    xs = np.empty(n + discard)
    x, y = x0, y0
    for t in range(n + discard):
        x, y = 1.0 - a * x * x + y, b * x
        xs[t] = x
    return xs[discard:]


def pareto_samples(alpha=2.5, n=5000, xmin=1.0, seed=0):
    """Continuous power law p(x) ~ x^-alpha for x >= xmin, by inverse CDF"""
    if alpha <= 1.0:
        raise InvalidSpecError("alpha must exceed 1")
    u = np.random.default_rng(seed).uniform(size=n)
    return xmin * (1.0 - u) ** (-1.0 / (alpha - 1.0))


def pareto_grid(alpha=2.5, n=5000, xmin=1.0):
    """Deterministic quantile grid of the same power law"""
    u = (np.arange(n) + 0.5) / n
    return xmin * (1.0 - u) ** (-1.0 / (alpha - 1.0))


def coupled_var_pair(n=100, coupling=0.9, noise=0.1, seed=0):
    """x white noise; y_t = coupling * x_{t-1} + noise * e_t"""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    y = noise * rng.normal(size=n)
    y[1:] += coupling * x[:-1]
    return x, y


_GENERATORS = {
    'blobs': blobs,
    'xor': xor,
    'logistic_map_series': logistic_map_series,
    'henon_series': henon_series,
    'pareto_samples': pareto_samples,
    'coupled_var_pair': coupled_var_pair,
}


def synthetic(kind, seed=0, **params):
    """Deterministic generator dispatch for test oracles"""
    if kind not in _GENERATORS:
        raise InvalidSpecError(f"Unknown synthetic kind {kind!r}; choose from {sorted(_GENERATORS)}")
    generator = _GENERATORS[kind]
    if kind in ('logistic_map_series', 'henon_series'):
        return generator(**params)
    try:
        return generator(seed=seed, **params)
    except TypeError as e:
        raise InvalidSpecError(f"Invalid parameters for {kind}: {e}") from e
