import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

log = logging.getLogger(__name__)

SERIES_KINDS = ("trend", "shock", "high_vol")
START_PRICE = 100.0
TREND_DRIFT = 0.0004
TREND_VOL = 0.01
SHOCK_DROP = 0.65
SHOCK_AT = 0.7
HIGH_VOLS = (0.01, 0.08)
REGIME_SWITCH_PROB = 0.02


class DataError(RuntimeError):
    pass


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Standardizer":
        values = np.asarray(values, dtype=np.float64)
        mean = values.mean(axis=0)
        std = values.std(axis=0)
        # a column constant on this split only; scale by 1 instead of dividing by 0
        std = np.where(std > 0.0, std, 1.0)
        return cls(mean=mean, std=std)

    @classmethod
    def fit_scalar(cls, values: np.ndarray, width: int = 1) -> "Standardizer":
        """One mean/std for every column, e.g. a price level shared by all lags."""
        values = np.asarray(values, dtype=np.float64)
        std = float(values.std())
        return cls(mean=np.full(width, float(values.mean())), std=np.full(width, std if std > 0.0 else 1.0))

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


@dataclass(frozen=True)
class TabularDataset:
    features: np.ndarray
    targets: np.ndarray
    feature_names: List[str] = field(default_factory=list)
    target_names: List[str] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def d_x(self) -> int:
        return self.features.shape[1]

    @property
    def d_y(self) -> int:
        return self.targets.shape[1]

    def subset(self, indices) -> "TabularDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return TabularDataset(self.features[idx], self.targets[idx], self.feature_names, self.target_names)

    def select(self, names: Sequence[str]) -> "TabularDataset":
        """Feature columns reordered to ``names``, e.g. the columns a model was trained on."""
        missing = [n for n in names if n not in self.feature_names]
        if missing:
            raise ValueError(f"dataset lacks feature column(s) {missing}; has {self.feature_names}")
        idx = [self.feature_names.index(n) for n in names]
        return TabularDataset(self.features[:, idx], self.targets, list(names), self.target_names)


@dataclass(frozen=True)
class WindowedSeries:
    windows: np.ndarray
    targets: np.ndarray
    index: np.ndarray

    def as_dataset(self) -> TabularDataset:
        names = [f"lag_{k}" for k in range(self.windows.shape[1], 0, -1)]
        return TabularDataset(self.windows, self.targets.reshape(-1, 1), names, ["next"])


def _parse_cell(path, cell, column, row_number):
    try:
        value = float(cell)
    except ValueError:
        raise DataError(f"{path}: non-numeric cell {cell!r} in column {column!r} at row {row_number}") from None
    if not math.isfinite(value):
        raise DataError(f"{path}: non-finite cell {cell!r} in column {column!r} at row {row_number}")
    return value


def load_csv(path, target_column: Union[str, Sequence[str]], drop_constant: bool = True) -> TabularDataset:
    """Read a headed, comma-separated numeric file.

    Rows are numbered from 1 after the header. Every non-target column is a
    feature; constant feature columns are dropped with a warning.
    """
    if not os.path.exists(path):
        raise DataError(f"dataset file not found: {path}")
    targets = [target_column] if isinstance(target_column, str) else list(target_column)

    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        missing = [t for t in targets if t not in header]
        if missing:
            raise DataError(f"{path}: target column(s) {missing} not in header {header}")

        rows = []
        for row_number, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {row_number} has {len(row)} cells, header has {len(header)}")
            rows.append([_parse_cell(path, c.strip(), header[k], row_number) for k, c in enumerate(row)])

    if not rows:
        raise DataError(f"{path}: no data rows")
    table = np.array(rows, dtype=np.float64)
    target_idx = [header.index(t) for t in targets]
    feature_idx = [k for k in range(len(header)) if k not in target_idx]

    if drop_constant:
        kept = []
        for k in feature_idx:
            if np.all(table[:, k] == table[0, k]):
                log.warning("%s: dropping constant column %r", path, header[k])
            else:
                kept.append(k)
        feature_idx = kept
    if not feature_idx:
        raise DataError(f"{path}: no feature columns left")

    return TabularDataset(
        features=table[:, feature_idx],
        targets=table[:, target_idx],
        feature_names=[header[k] for k in feature_idx],
        target_names=targets,
    )


def load_price_csv(path, column: str = "close") -> np.ndarray:
    """Chronological closing prices from a price history file (e.g. a Date,Open,...,Close export)."""
    if not os.path.exists(path):
        raise DataError(f"price file not found: {path}")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        lowered = [h.lower() for h in header]
        if column.lower() not in lowered:
            raise DataError(f"{path}: price column {column!r} not in header {header}")
        k = lowered.index(column.lower())
        prices = []
        for row_number, row in enumerate(reader, start=1):
            if not row:
                continue
            value = _parse_cell(path, row[k].strip(), header[k], row_number)
            if value <= 0.0:
                raise DataError(f"{path}: non-positive price at row {row_number}")
            prices.append(value)
    return np.array(prices, dtype=np.float64)


def split_folds(n: int, n_folds: int, test_fraction: float, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Seeded shuffle-splits with exact test size round(n * test_fraction).

    Folds come in blocks: a block shuffles once (its own seeded stream) and
    walks the permutation cyclically in test-sized steps, so every index is
    tested within ceil(n / n_test) folds and later blocks reshuffle.
    """
    if n_folds < 1:
        raise ValueError(f"n_folds must be >= 1, got {n_folds}")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if n < 2:
        raise ValueError(f"cannot split {n} samples")
    n_test = min(n - 1, max(1, int(round(n * test_fraction))))
    per_block = -(-n // n_test)

    folds = []
    perm = None
    for fold in range(n_folds):
        block, step = divmod(fold, per_block)
        if step == 0:
            perm = np.random.default_rng([seed, block]).permutation(n)
        test_mask = np.zeros(n, dtype=bool)
        test_mask[perm[(step * n_test + np.arange(n_test)) % n]] = True
        folds.append((np.flatnonzero(~test_mask), np.flatnonzero(test_mask)))
    return folds


def window_series(prices, window: int = 60) -> WindowedSeries:
    prices = np.asarray(prices, dtype=np.float64)
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if prices.ndim != 1 or prices.shape[0] <= window:
        raise ValueError(f"series of length {prices.shape[0]} too short for window {window}")
    count = prices.shape[0] - window
    windows = np.lib.stride_tricks.sliding_window_view(prices, window)[:count].copy()
    return WindowedSeries(windows=windows, targets=prices[window:].copy(), index=np.arange(window, prices.shape[0]))


def split_series(prices, train_fraction: float) -> Tuple[np.ndarray, np.ndarray]:
    """Chronological split: train prefix, test suffix."""
    prices = np.asarray(prices, dtype=np.float64)
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    cut = int(math.floor(prices.shape[0] * train_fraction))
    return prices[:cut], prices[cut:]


def synthetic_series(kind: str, n: int, seed: int) -> np.ndarray:
    if kind not in SERIES_KINDS:
        raise ValueError(f"unknown series kind {kind!r}, expected one of {SERIES_KINDS}")
    if n <= 100:
        raise ValueError(f"synthetic series needs n > 100, got {n}")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(n - 1)

    if kind == "high_vol":
        vols = np.empty(n - 1)
        regime = 0
        switches = rng.random(n - 1) < REGIME_SWITCH_PROB
        for t in range(n - 1):
            if switches[t]:
                regime = 1 - regime
            vols[t] = HIGH_VOLS[regime]
        log_returns = TREND_DRIFT + vols * noise
    else:
        log_returns = TREND_DRIFT + TREND_VOL * noise
        if kind == "shock":
            # step k moves price[k] -> price[k + 1]
            log_returns[int(math.floor(SHOCK_AT * n)) - 1] += math.log(SHOCK_DROP)

    prices = START_PRICE * np.exp(np.concatenate([[0.0], np.cumsum(log_returns)]))
    return prices


@dataclass(frozen=True)
class DatasetSpec:
    """Where a named dataset comes from: a tabular CSV, a price CSV, or a synthetic series."""

    name: str
    kind: str = "tabular"
    path: Optional[str] = None
    target: Optional[str] = None
    column: str = "close"
    synthetic: Optional[str] = None
    length: int = 1500

    @classmethod
    def resolve(cls, name: str, datasets: dict, default_target: Optional[str] = None) -> "DatasetSpec":
        if name in datasets:
            entry = dict(datasets[name])
            return cls(name=name, **entry)
        if name.lower().endswith(".csv"):
            if not default_target:
                raise ValueError(f"dataset {name!r} needs data.target to name the target column")
            return cls(name=os.path.splitext(os.path.basename(name))[0], path=name, target=default_target)
        raise ValueError(f"unknown dataset {name!r}; known: {sorted(datasets)}")

    def load_tabular(self, drop_constant: bool = True) -> TabularDataset:
        if self.kind != "tabular":
            raise ValueError(f"dataset {self.name!r} is a {self.kind} dataset")
        if not self.path or not os.path.exists(self.path):
            raise DataError(f"dataset {self.name!r} missing: expected CSV at {self.path}")
        return load_csv(self.path, self.target, drop_constant=drop_constant)

    def load_prices(self, seed: int = 0) -> np.ndarray:
        if self.kind != "series":
            raise ValueError(f"dataset {self.name!r} is a {self.kind} dataset")
        if self.synthetic:
            return synthetic_series(self.synthetic, self.length, seed)
        if not self.path or not os.path.exists(self.path):
            raise DataError(f"dataset {self.name!r} missing: expected price CSV at {self.path}")
        return load_price_csv(self.path, self.column)
