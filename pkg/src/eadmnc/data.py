"""Mixed numerical/categorical tabular data: schema, loading, encoding, splits.

A :class:`Dataset` keeps its rows column-wise (a float matrix for the
continuous part and an integer matrix of level indices for the categorical
part) and hands out :class:`MixedRecord` views on demand.  Arrays are marked
read-only so a dataset can be shared freely between worker threads.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

NORMAL = "normal"
ANOMALOUS = "anomalous"

# Reserved level index for categorical strings never seen while building the
# level dictionary.  It one-hot encodes to an all-zero block.
UNKNOWN_LEVEL = -1

_DEFAULT_ANOMALOUS_TOKENS = {"1", "true", "yes", "anomaly", "anomalous", "attack", "outlier", "abnormal"}
_DEFAULT_NORMAL_TOKENS = {"0", "false", "no", "normal", "benign", "inlier"}


class DataError(ValueError):
    """Raised for unreadable or inconsistent input data."""


class SchemaError(DataError):
    pass


class EncodingError(DataError):
    pass


@dataclass(frozen=True)
class Schema:
    """Column layout of a mixed dataset.

    ``categorical_levels[i]`` is the ordered level dictionary of categorical
    feature ``i``; an empty tuple means "build it from the data on first load".
    """

    continuous_names: tuple[str, ...]
    categorical_names: tuple[str, ...] = ()
    categorical_levels: tuple[tuple[str, ...], ...] = ()
    label_column: str | None = None
    anomalous_values: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "continuous_names", tuple(self.continuous_names))
        object.__setattr__(self, "categorical_names", tuple(self.categorical_names))
        levels = tuple(tuple(str(v) for v in lv) for lv in self.categorical_levels)
        if not levels:
            levels = tuple(() for _ in self.categorical_names)
        object.__setattr__(self, "categorical_levels", levels)
        if self.anomalous_values is not None:
            object.__setattr__(self, "anomalous_values", tuple(str(v) for v in self.anomalous_values))

        names = list(self.continuous_names) + list(self.categorical_names)
        if self.label_column is not None:
            names.append(self.label_column)
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"duplicate column names in schema: {dupes}")
        if len(levels) != len(self.categorical_names):
            raise SchemaError("categorical_levels must have one entry per categorical feature")
        for name, lv in zip(self.categorical_names, levels):
            if lv and len(lv) < 2:
                raise SchemaError(f"categorical feature {name!r} needs at least 2 levels, got {len(lv)}")
            if len(set(lv)) != len(lv):
                raise SchemaError(f"categorical feature {name!r} has repeated levels")

    @property
    def n_continuous(self) -> int:
        return len(self.continuous_names)

    @property
    def n_categorical(self) -> int:
        return len(self.categorical_names)

    @property
    def categorical_cardinalities(self) -> tuple[int, ...]:
        return tuple(len(lv) for lv in self.categorical_levels)

    @property
    def is_resolved(self) -> bool:
        return all(len(lv) >= 2 for lv in self.categorical_levels)

    @property
    def one_hot_width(self) -> int:
        """k+1: total number of one-hot components."""
        return int(sum(self.categorical_cardinalities))

    @property
    def one_hot_offsets(self) -> np.ndarray:
        cards = np.asarray(self.categorical_cardinalities, dtype=np.int64)
        return np.concatenate([[0], np.cumsum(cards)[:-1]]).astype(np.int64) if len(cards) else cards

    def one_hot_term(self, j: int) -> tuple[int, int]:
        """Map a one-hot index to (categorical feature index, level index)."""
        if not 0 <= j < self.one_hot_width:
            raise EncodingError(f"one-hot index {j} outside [0, {self.one_hot_width})")
        offsets = self.one_hot_offsets
        feature = int(np.searchsorted(offsets, j, side="right") - 1)
        return feature, int(j - offsets[feature])

    def level_index(self, feature: int, value: str) -> int:
        try:
            return self.categorical_levels[feature].index(str(value))
        except ValueError:
            return UNKNOWN_LEVEL

    def is_anomalous_label(self, value: str) -> bool:
        token = str(value).strip()
        if self.anomalous_values is not None:
            return token in self.anomalous_values
        low = token.lower()
        if low in _DEFAULT_ANOMALOUS_TOKENS:
            return True
        if low in _DEFAULT_NORMAL_TOKENS:
            return False
        raise DataError(
            f"cannot interpret label {value!r}; list the anomalous values in the schema "
            f"(label: {{name, anomalous: [...]}})"
        )

    def with_levels(self, levels: Sequence[Sequence[str]]) -> "Schema":
        return Schema(
            self.continuous_names,
            self.categorical_names,
            tuple(tuple(lv) for lv in levels),
            self.label_column,
            self.anomalous_values,
        )

    def to_dict(self) -> dict:
        out: dict = {
            "continuous": list(self.continuous_names),
            "categorical": [
                {"name": n, "levels": list(lv)} for n, lv in zip(self.categorical_names, self.categorical_levels)
            ],
        }
        if self.label_column is not None:
            label: dict = {"name": self.label_column}
            if self.anomalous_values is not None:
                label["anomalous"] = list(self.anomalous_values)
            out["label"] = label
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "Schema":
        if not isinstance(obj, dict):
            raise SchemaError("schema must be a JSON object")
        cont = obj.get("continuous", [])
        cats = obj.get("categorical", [])
        names, levels = [], []
        for item in cats:
            if isinstance(item, str):
                names.append(item)
                levels.append(())
            else:
                names.append(item["name"])
                levels.append(tuple(str(v) for v in item.get("levels", [])))
        label = obj.get("label")
        anomalous = None
        if isinstance(label, dict):
            anomalous = label.get("anomalous")
            label = label.get("name")
        return cls(tuple(cont), tuple(names), tuple(levels), label, tuple(anomalous) if anomalous else None)


def load_schema(path: str | Path) -> Schema:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"schema file not found: {path}")
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    return Schema.from_dict(obj)


def save_schema(schema: Schema, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(schema.to_dict(), fh, indent=2)


@dataclass(frozen=True)
class MixedRecord:
    x: np.ndarray
    levels: np.ndarray
    label: str | None = None


@dataclass(frozen=True)
class OneHotView:
    y: np.ndarray

    @property
    def width(self) -> int:
        return int(self.y.shape[0])

    def mask(self, j: int) -> np.ndarray:
        return unit_mask(j, self.width)


def unit_mask(j: int, width: int) -> np.ndarray:
    """The mask m_j: a unit vector of length ``width`` with a single 1 at ``j``."""
    if not 0 <= j < width:
        raise EncodingError(f"mask index {j} outside [0, {width})")
    m = np.zeros(width, dtype=np.int8)
    m[j] = 1
    return m


@dataclass(frozen=True)
class StandardizationStats:
    means: np.ndarray
    stds: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        safe = np.where(self.stds > 0, self.stds, 1.0)
        out = (x - self.means) / safe
        # constant training columns map to zero
        return np.where(self.stds > 0, out, 0.0)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.stds + self.means

    def inverse_feature(self, i: int, value: float) -> float:
        return float(value * self.stds[i] + self.means[i])

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "stds": self.stds.tolist()}

    @classmethod
    def from_dict(cls, obj: dict) -> "StandardizationStats":
        return cls(np.asarray(obj["means"], dtype=np.float64), np.asarray(obj["stds"], dtype=np.float64))


def _readonly(a: np.ndarray | None) -> np.ndarray | None:
    # writable inputs may still be owned by the caller, so freeze a copy
    if a is not None and a.flags.writeable:
        a = a.copy()
        a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Rows of a mixed dataset, stored column-wise.

    ``labels`` is a boolean array (True = anomalous) or None for unlabelled
    data.  ``index`` holds each row's position in the originally loaded file.
    """

    schema: Schema
    x: np.ndarray
    levels: np.ndarray
    labels: np.ndarray | None = None
    standardization_stats: StandardizationStats | None = None
    index: np.ndarray | None = field(default=None)

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        levels = np.ascontiguousarray(self.levels, dtype=np.int64)
        if x.ndim != 2 or levels.ndim != 2 or x.shape[0] != levels.shape[0]:
            raise DataError(f"expected 2-D x and levels with equal row counts, got {x.shape} and {levels.shape}")
        n = x.shape[0]
        if x.shape[1] != self.schema.n_continuous or levels.shape[1] != self.schema.n_categorical:
            raise DataError(
                f"data has {x.shape[1]} continuous / {levels.shape[1]} categorical columns, schema expects "
                f"{self.schema.n_continuous} / {self.schema.n_categorical}"
            )
        labels = None if self.labels is None else np.asarray(self.labels, dtype=bool).reshape(n)
        index = np.arange(n, dtype=np.int64) if self.index is None else np.asarray(self.index, dtype=np.int64)
        if index.shape != (n,):
            raise DataError("index length does not match the number of rows")
        cards = np.asarray(self.schema.categorical_cardinalities, dtype=np.int64)
        if levels.size and self.schema.is_resolved:
            bad = (levels < UNKNOWN_LEVEL) | (levels >= cards[None, :])
            if bad.any():
                r, c = np.argwhere(bad)[0]
                raise EncodingError(
                    f"row {r}: level {levels[r, c]} out of range for {self.schema.categorical_names[c]!r}"
                )
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "levels", _readonly(levels))
        object.__setattr__(self, "labels", _readonly(labels))
        object.__setattr__(self, "index", _readonly(index))

    def __len__(self) -> int:
        return int(self.x.shape[0])

    def __getitem__(self, i: int) -> MixedRecord:
        label = None
        if self.labels is not None:
            label = ANOMALOUS if self.labels[i] else NORMAL
        return MixedRecord(self.x[i], self.levels[i], label)

    def __iter__(self) -> Iterator[MixedRecord]:
        for i in range(len(self)):
            yield self[i]

    @property
    def records(self) -> "Dataset":
        return self

    @property
    def is_standardized(self) -> bool:
        return self.standardization_stats is not None

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def subset(self, rows: np.ndarray) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            self.schema,
            self.x[rows],
            self.levels[rows],
            None if self.labels is None else self.labels[rows],
            self.standardization_stats,
            self.index[rows],
        )

    def with_x(self, x: np.ndarray, stats: StandardizationStats | None) -> "Dataset":
        return Dataset(self.schema, x, self.levels, self.labels, stats, self.index)


def load_dataset(path: str | Path, schema: Schema, delimiter: str = ",") -> Dataset:
    """Parse a delimited text file with a header row into a :class:`Dataset`.

    Level dictionaries missing from ``schema`` are built in first-seen order;
    the returned dataset carries the completed schema.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    try:
        frame = pd.read_csv(path, sep=delimiter, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: no data rows") from None
    if len(frame) == 0:
        raise DataError(f"{path}: no data rows")
    frame.columns = [c.strip() for c in frame.columns]

    wanted = list(schema.continuous_names) + list(schema.categorical_names)
    if schema.label_column is not None:
        wanted.append(schema.label_column)
    missing = [c for c in wanted if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")

    n = len(frame)
    x = np.empty((n, schema.n_continuous), dtype=np.float64)
    for i, name in enumerate(schema.continuous_names):
        raw = frame[name].str.strip()
        try:
            # numpy's string parser round-trips repr() exactly, pandas' does not
            values = raw.to_numpy(dtype=str).astype(np.float64)
        except ValueError:
            values = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=np.float64)
        bad = ~np.isfinite(values)
        if bad.any():
            r = int(np.flatnonzero(bad)[0])
            # +2: one for the header line, one for 1-based numbering
            raise DataError(f"{path}: line {r + 2}, column {name!r}: cannot parse {raw.iloc[r]!r} as a number")
        x[:, i] = values

    levels = np.empty((n, schema.n_categorical), dtype=np.int64)
    resolved = []
    for i, name in enumerate(schema.categorical_names):
        col = frame[name].str.strip()
        known = schema.categorical_levels[i]
        if not known:
            known = tuple(str(v) for v in pd.unique(col))
            if len(known) < 2:
                raise SchemaError(f"{path}: categorical column {name!r} has a single level {known!r}")
        lookup = {v: k for k, v in enumerate(known)}
        levels[:, i] = col.map(lambda v: lookup.get(v, UNKNOWN_LEVEL)).to_numpy(dtype=np.int64)
        resolved.append(known)
    full_schema = schema.with_levels(resolved)

    labels = None
    if schema.label_column is not None:
        col = frame[schema.label_column].str.strip()
        mapping = {v: full_schema.is_anomalous_label(v) for v in pd.unique(col)}
        labels = col.map(mapping).to_numpy(dtype=bool)
    return Dataset(full_schema, x, levels, labels)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write a dataset back to CSV using the schema's level names."""
    schema = ds.schema
    header = list(schema.continuous_names) + list(schema.categorical_names)
    if ds.labels is not None:
        header.append(schema.label_column or "label")
    x = ds.x if ds.standardization_stats is None else ds.standardization_stats.inverse(ds.x)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in range(len(ds)):
            row: list = [repr(float(v)) for v in x[r]]
            for c, lv in enumerate(ds.levels[r]):
                row.append(schema.categorical_levels[c][lv] if lv != UNKNOWN_LEVEL else "?")
            if ds.labels is not None:
                row.append("1" if ds.labels[r] else "0")
            writer.writerow(row)


def compute_stats(x: np.ndarray) -> StandardizationStats:
    x = np.asarray(x, dtype=np.float64)
    return StandardizationStats(x.mean(axis=0), x.std(axis=0))


def standardize(ds: Dataset, stats: StandardizationStats | None = None) -> Dataset:
    """Z-score the continuous columns (population std); stats default to ``ds``'s own."""
    if ds.is_standardized:
        raise DataError("dataset is already standardized")
    stats = compute_stats(ds.x) if stats is None else stats
    return ds.with_x(stats.transform(ds.x), stats)


def one_hot(record: MixedRecord, schema: Schema) -> OneHotView:
    levels = np.asarray(record.levels, dtype=np.int64)
    if levels.shape != (schema.n_categorical,):
        raise EncodingError(f"record has {levels.shape} levels, schema expects {schema.n_categorical}")
    return OneHotView(one_hot_matrix(levels[None, :], schema)[0])


def one_hot_matrix(levels: np.ndarray, schema: Schema) -> np.ndarray:
    """Vectorised one-hot encoding of an (n, n_categorical) level matrix."""
    levels = np.asarray(levels, dtype=np.int64)
    n = levels.shape[0]
    width = schema.one_hot_width
    cards = np.asarray(schema.categorical_cardinalities, dtype=np.int64)
    out = np.zeros((n, width), dtype=np.int8)
    if levels.size == 0:
        return out
    if ((levels < UNKNOWN_LEVEL) | (levels >= cards[None, :])).any():
        r, c = np.argwhere((levels < UNKNOWN_LEVEL) | (levels >= cards[None, :]))[0]
        raise EncodingError(f"level {levels[r, c]} out of range for feature {schema.categorical_names[c]!r}")
    cols = levels + schema.one_hot_offsets[None, :]
    known = levels != UNKNOWN_LEVEL
    rows = np.broadcast_to(np.arange(n)[:, None], levels.shape)
    out[rows[known], cols[known]] = 1
    return out


def decode(view: OneHotView | np.ndarray, schema: Schema) -> np.ndarray:
    """Inverse of :func:`one_hot`: all-zero blocks decode to ``UNKNOWN_LEVEL``."""
    y = view.y if isinstance(view, OneHotView) else np.asarray(view)
    out = np.empty(schema.n_categorical, dtype=np.int64)
    for i, (off, card) in enumerate(zip(schema.one_hot_offsets, schema.categorical_cardinalities)):
        block = y[off : off + card]
        hits = np.flatnonzero(block)
        if len(hits) > 1:
            raise EncodingError(f"block {i} has {len(hits)} active components")
        out[i] = hits[0] if len(hits) else UNKNOWN_LEVEL
    return out


def split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Random train/test partition.

    When labels exist, anomalous rows drawn into the training share are moved
    to the test side so the detector only ever sees normal data.
    """
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError(f"train_fraction must be in (0, 1], got {train_fraction}")
    n = len(ds)
    if n == 0:
        raise DataError("cannot split an empty dataset")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    train_rows = perm[:n_train]
    if ds.labels is not None:
        train_rows = train_rows[~ds.labels[train_rows]]
    in_train = np.zeros(n, dtype=bool)
    in_train[train_rows] = True
    return ds.subset(np.flatnonzero(in_train)), ds.subset(np.flatnonzero(~in_train))


class SyntheticGenerator:
    """Labelled mixed data with a controllable number of corrupted variables.

    Normal rows come from a fixed two-component Gaussian mixture on the
    continuous part, with each categorical drawn from a component-specific
    distribution over all but its last level.  An anomalous row is a normal row
    in which ``nv`` randomly chosen variables are pushed out of the normal
    support: continuous values land at least 6 standard deviations away from
    every component mean, categoricals take the reserved last level.

    The mixture parameters depend only on the dimensions and ``structure_seed``
    so every ``nv`` setting of a sweep shares the same normal population.
    """

    SHIFT_SIGMAS = 6.0

    def __init__(self, d_cont: int, d_cat: int, cardinality: int = 4, structure_seed: int = 20220807):
        if d_cont < 0 or d_cat < 0 or d_cont + d_cat == 0:
            raise ValueError("need at least one variable")
        if cardinality < 3:
            raise ValueError("cardinality must be >= 3 (one level is reserved for anomalies)")
        self.d_cont, self.d_cat, self.cardinality = d_cont, d_cat, cardinality
        rng = np.random.default_rng([structure_seed, d_cont, d_cat, cardinality])
        self.weights = np.array([0.6, 0.4])
        signs = rng.choice([-1.0, 1.0], size=d_cont)
        self.means = np.stack([np.zeros(d_cont), 3.0 * signs])
        self.stds = rng.uniform(0.7, 1.3, size=(2, d_cont))
        probs = rng.dirichlet(np.ones(cardinality - 1), size=(2, d_cat))
        self.level_probs = np.concatenate([probs, np.zeros((2, d_cat, 1))], axis=2)
        self.schema = Schema(
            tuple(f"x{i}" for i in range(d_cont)),
            tuple(f"c{i}" for i in range(d_cat)),
            tuple(tuple(f"v{k}" for k in range(cardinality)) for _ in range(d_cat)),
            "label",
            ("1",),
        )

    @property
    def rare_level(self) -> int:
        return self.cardinality - 1

    def sample(
        self, n: int, nv: int, anomaly_ratio: float, seed: int
    ) -> tuple[Dataset, np.ndarray]:
        """Return the dataset and the (n, d_cont + d_cat) mask of corrupted variables."""
        total_vars = self.d_cont + self.d_cat
        if n < 1:
            raise ValueError("n must be >= 1")
        if not 0 <= nv <= total_vars:
            raise ValueError(f"nv must be in [0, {total_vars}], got {nv}")
        if not 0.0 <= anomaly_ratio < 0.5:
            raise ValueError(f"anomaly_ratio must be in [0, 0.5), got {anomaly_ratio}")
        rng = np.random.default_rng(seed)
        comp = (rng.random(n) < self.weights[1]).astype(np.int64)
        x = self.means[comp] + self.stds[comp] * rng.standard_normal((n, self.d_cont))
        levels = np.empty((n, self.d_cat), dtype=np.int64)
        for f in range(self.d_cat):
            cdf = np.cumsum(self.level_probs[comp, f, :], axis=1)
            u = rng.random(n)[:, None]
            levels[:, f] = np.minimum((u > cdf).sum(axis=1), self.cardinality - 2)

        n_anom = int(math.floor(anomaly_ratio * n))
        labels = np.zeros(n, dtype=bool)
        mask = np.zeros((n, total_vars), dtype=bool)
        if n_anom and nv:
            rows = rng.choice(n, size=n_anom, replace=False)
            labels[rows] = True
            hi = (self.means + self.SHIFT_SIGMAS * self.stds).max(axis=0)
            lo = (self.means - self.SHIFT_SIGMAS * self.stds).min(axis=0)
            spread = self.stds.max(axis=0)
            for r in rows:
                chosen = rng.choice(total_vars, size=nv, replace=False)
                mask[r, chosen] = True
                for v in chosen:
                    if v < self.d_cont:
                        jitter = rng.uniform(0.0, 2.0) * spread[v]
                        x[r, v] = hi[v] + jitter if rng.random() < 0.5 else lo[v] - jitter
                    else:
                        levels[r, v - self.d_cont] = self.rare_level
        elif n_anom:
            labels[rng.choice(n, size=n_anom, replace=False)] = True
        return Dataset(self.schema, x, levels, labels), mask

    def outside_support(self, ds: Dataset) -> np.ndarray:
        """Per-variable audit: True where a value lies outside the normal support."""
        x = ds.x if ds.standardization_stats is None else ds.standardization_stats.inverse(ds.x)
        dev = np.abs(x[:, None, :] - self.means[None, :, :]) / self.stds[None, :, :]
        cont_out = (dev >= self.SHIFT_SIGMAS).all(axis=1)
        cat_out = np.zeros(ds.levels.shape, dtype=bool)
        for f in range(self.d_cat):
            support = (self.level_probs[:, f, :] > 0).any(axis=0)
            cat_out[:, f] = ~support[ds.levels[:, f]]
        return np.concatenate([cont_out, cat_out], axis=1)


def generate_synthetic(
    n: int,
    d_cont: int,
    d_cat: int,
    nv: int,
    anomaly_ratio: float,
    seed: int,
    cardinality: int = 4,
) -> Dataset:
    gen = SyntheticGenerator(d_cont, d_cat, cardinality)
    ds, _ = gen.sample(n, nv, anomaly_ratio, seed)
    return ds
