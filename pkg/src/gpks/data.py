"""CSV ingestion, feature construction, splitting, standardization, persistence."""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .gp import Dataset, StandardizationTransform, TrainedGP, fit_gp
from .kernels import format_kernel_expr, layout, noise_slot, parse_kernel_expr

__all__ = [
    "DataError",
    "MissingColumnError",
    "RowError",
    "StratificationError",
    "ModelFormatError",
    "CsvSchema",
    "RawTable",
    "Stratified",
    "Temporal",
    "load_csv",
    "make_lag_features",
    "stratified_split",
    "temporal_split",
    "rows_for_units",
    "standardize_fit",
    "standardize_apply",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
    "atomic_write",
    "FORMAT_VERSION",
]

FORMAT_VERSION = 1


class DataError(ValueError):
    pass


class MissingColumnError(DataError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"missing column(s): {', '.join(self.columns)}")


class RowError(DataError):
    """One or more rows had missing or unparseable required values."""

    def __init__(self, problems):
        self.problems = list(problems)  # (line, column, raw value)
        self.rows = sorted({line for line, _, _ in self.problems})
        shown = "; ".join(f"line {ln}, column {col!r}: {val!r}" for ln, col, val in self.problems[:10])
        more = f" (+{len(self.problems) - 10} more)" if len(self.problems) > 10 else ""
        super().__init__(f"rejected {len(self.rows)} row(s): {shown}{more}")


class StratificationError(DataError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CsvSchema:
    feature_columns: tuple = ()
    target_column: str = "y"
    group_column: str | None = None
    timestamp_column: str | None = None
    unit_column: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "feature_columns", tuple(self.feature_columns))
        if self.target_column in self.feature_columns:
            raise DataError(f"target {self.target_column!r} is also listed as a feature")
        if len(set(self.feature_columns)) != len(self.feature_columns):
            raise DataError("feature column names must be unique")

    @classmethod
    def parse(cls, text: str) -> "CsvSchema":
        """Inline form, e.g. ``target=y;features=a,b;group=rate;unit=cell``."""
        keys = {"target": "target_column", "features": "feature_columns",
                "group": "group_column", "timestamp": "timestamp_column", "unit": "unit_column"}
        kwargs = {}
        for part in filter(None, (p.strip() for p in text.split(";"))):
            if "=" not in part:
                raise DataError(f"bad schema entry {part!r}; expected key=value")
            key, value = (s.strip() for s in part.split("=", 1))
            if key not in keys:
                raise DataError(f"unknown schema key {key!r}")
            if key == "features":
                value = tuple(v.strip() for v in value.split(",") if v.strip())
            kwargs[keys[key]] = value
        if "target_column" not in kwargs:
            raise DataError("schema needs a target")
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "feature_columns": list(self.feature_columns),
            "target_column": self.target_column,
            "group_column": self.group_column,
            "timestamp_column": self.timestamp_column,
            "unit_column": self.unit_column,
        }


@dataclass
class RawTable:
    """Parsed rows in original units, before any standardization."""

    X: np.ndarray
    y: np.ndarray
    feature_names: tuple
    target_name: str
    labels: dict = field(default_factory=dict)  # column name -> list of str
    timestamps: list | None = None
    lines: list | None = None  # source line number of each row

    def __len__(self) -> int:
        return self.y.shape[0]

    def subset(self, rows) -> "RawTable":
        rows = np.asarray(rows, dtype=int)
        return RawTable(
            self.X[rows],
            self.y[rows],
            self.feature_names,
            self.target_name,
            {k: [v[i] for i in rows] for k, v in self.labels.items()},
            None if self.timestamps is None else [self.timestamps[i] for i in rows],
            None if self.lines is None else [self.lines[i] for i in rows],
        )


def _parse_float(text: str) -> float | None:
    try:
        value = float(text)
    except (TypeError, ValueError):
        return None
    return value if math.isfinite(value) else None


def load_csv(path, schema: CsvSchema, require_target: bool = True) -> RawTable:
    """Read a headed UTF-8 CSV according to ``schema``.

    Every row with a missing, unparseable or non-finite feature/target, or an
    unparseable timestamp, is reported together in one :class:`RowError`.
    With ``require_target=False`` an absent target column yields NaN targets.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        has_target = schema.target_column in header or require_target
        wanted = list(schema.feature_columns) + ([schema.target_column] if has_target else [])
        wanted += [c for c in (schema.group_column, schema.unit_column, schema.timestamp_column) if c]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise MissingColumnError(missing)
        label_cols = [c for c in (schema.group_column, schema.unit_column) if c]

        X, y, lines, stamps, problems = [], [], [], [], []
        labels = {c: [] for c in label_cols}
        for row in reader:
            line = reader.line_num
            bad = False
            values = []
            for col in wanted[: len(schema.feature_columns) + has_target]:
                v = _parse_float(row.get(col))
                if v is None:
                    problems.append((line, col, row.get(col)))
                    bad = True
                values.append(v)
            stamp = None
            if schema.timestamp_column:
                raw = row.get(schema.timestamp_column)
                try:
                    stamp = datetime.fromisoformat(raw.strip())
                except (AttributeError, ValueError):
                    problems.append((line, schema.timestamp_column, raw))
                    bad = True
            for col in label_cols:
                if row.get(col) in (None, ""):
                    problems.append((line, col, row.get(col)))
                    bad = True
            if bad:
                continue
            if not has_target:
                values.append(math.nan)
            X.append(values[:-1])
            y.append(values[-1])
            lines.append(line)
            stamps.append(stamp)
            for col in label_cols:
                labels[col].append(row[col].strip())
    if problems:
        raise RowError(problems)
    if not y:
        raise DataError(f"{path}: no data rows")
    return RawTable(
        np.array(X, dtype=float).reshape(len(y), len(schema.feature_columns)),
        np.array(y, dtype=float),
        tuple(schema.feature_columns),
        schema.target_column,
        labels,
        stamps if schema.timestamp_column else None,
        lines,
    )


def make_lag_features(
    timestamps,
    values,
    n_lags: int = 24,
    week: bool = True,
    day: bool = True,
    hour: bool = True,
    name: str = "P",
) -> RawTable:
    """Build lagged-window rows from an hourly series.

    Row ``t`` holds ``[P(t-n_lags+1), ..., P(t)]`` followed by the enabled
    calendar codes of ``t`` (ISO week, ISO weekday, hour); its target is
    ``P(t+1)``. Row timestamps are those of ``t``.
    """
    values = np.asarray(values, dtype=float).ravel()
    timestamps = list(timestamps)
    if n_lags < 1:
        raise DataError("n_lags must be >= 1")
    if len(timestamps) != values.size:
        raise DataError("timestamps and values differ in length")
    if values.size < n_lags + 1:
        raise DataError(f"series of length {values.size} is too short for {n_lags} lags")
    hour_step = timedelta(hours=1)
    for i in range(1, len(timestamps)):
        if timestamps[i] - timestamps[i - 1] != hour_step:
            raise DataError(
                f"series is not hourly between {timestamps[i - 1]} and {timestamps[i]}"
            )

    rows, targets, stamps = [], [], []
    for t in range(n_lags - 1, values.size - 1):
        feats = list(values[t - n_lags + 1 : t + 1])
        ts = timestamps[t]
        if week:
            feats.append(ts.isocalendar()[1])
        if day:
            feats.append(ts.isoweekday())
        if hour:
            feats.append(ts.hour)
        rows.append(feats)
        targets.append(values[t + 1])
        stamps.append(ts)
    names = [f"{name}(t-{k})" if k else f"{name}(t)" for k in range(n_lags - 1, -1, -1)]
    names += [c for c, on in (("W(t)", week), ("D(t)", day), ("H(t)", hour)) if on]
    return RawTable(
        np.array(rows, dtype=float), np.array(targets), tuple(names), f"{name}(t+1)",
        timestamps=stamps,
    )


@dataclass(frozen=True)
class Stratified:
    group_column: str
    ratio: float
    repeats: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.ratio < 1:
            raise DataError("split ratio must lie in (0, 1)")
        if self.repeats < 1:
            raise DataError("repeats must be >= 1")


@dataclass(frozen=True)
class Temporal:
    train_range: tuple  # (start, end) half-open
    test_range: tuple

    def __post_init__(self):
        (a0, a1), (b0, b1) = self.train_range, self.test_range
        if not (a0 < a1 and b0 < b1):
            raise DataError("time ranges must have start < end")
        if a0 < b1 and b0 < a1:
            raise DataError("train and test time ranges overlap")


def _units(table: RawTable, unit_column: str | None) -> list:
    if unit_column is None:
        return list(range(len(table)))
    return table.labels[unit_column]


def stratified_split(table: RawTable, group_column: str, ratio: float, seed: int, unit_column: str | None = None):
    """Split units into train/test within each stratum of ``group_column``.

    A unit is one value of ``unit_column`` (every row is its own unit when it
    is ``None``); all rows of a unit land on the same side. Each stratum puts
    ``round(ratio * count)`` units in train, at least one per side. Returns
    sorted ``(train_units, test_units)``.
    """
    if group_column not in table.labels:
        raise StratificationError(f"no group labels for column {group_column!r}")
    units = _units(table, unit_column)
    stratum_of: dict = {}
    for unit, group in zip(units, table.labels[group_column]):
        if stratum_of.setdefault(unit, group) != group:
            raise StratificationError(f"unit {unit!r} appears in groups {stratum_of[unit]!r} and {group!r}")
    strata: dict = {}
    for unit, group in stratum_of.items():
        strata.setdefault(group, []).append(unit)

    rng = np.random.default_rng(seed)
    train, test = [], []
    for group in sorted(strata):
        members = sorted(strata[group])
        if len(members) < 2:
            raise StratificationError(f"stratum {group!r} has a single unit")
        order = rng.permutation(len(members))
        n_train = min(max(int(math.floor(ratio * len(members) + 0.5)), 1), len(members) - 1)
        train += [members[i] for i in order[:n_train]]
        test += [members[i] for i in order[n_train:]]
    return sorted(train), sorted(test)


def rows_for_units(table: RawTable, units, unit_column: str | None = None) -> np.ndarray:
    wanted = set(units)
    return np.array([i for i, u in enumerate(_units(table, unit_column)) if u in wanted], dtype=int)


def temporal_split(table: RawTable, plan: Temporal):
    """Row indices whose timestamps fall in the train / test ranges."""
    if table.timestamps is None:
        raise DataError("temporal split needs a timestamp column")
    (a0, a1), (b0, b1) = plan.train_range, plan.test_range
    train = [i for i, t in enumerate(table.timestamps) if a0 <= t < a1]
    test = [i for i, t in enumerate(table.timestamps) if b0 <= t < b1]
    if not train or not test:
        raise DataError(f"temporal split left {len(train)} train and {len(test)} test rows")
    return np.array(train, dtype=int), np.array(test, dtype=int)


def _fit_transform(values: np.ndarray, tag: str) -> StandardizationTransform:
    means = values.mean(axis=0)
    scales = values.std(axis=0)
    constant = tuple(int(i) for i in np.flatnonzero(~(scales > 0)))
    if constant:
        warnings.warn(f"constant column(s) {list(constant)} only centred", RuntimeWarning, stacklevel=3)
        scales = np.where(scales > 0, scales, 1.0)
    return StandardizationTransform(means, scales, tag, constant)


def standardize_fit(table: RawTable):
    """Fit column standardization on training rows (population sd).

    Returns ``(dataset, (x_transform, y_transform))``.
    """
    if len(table) < 2:
        raise DataError("need at least two training rows")
    x_tf = _fit_transform(table.X, "")
    y_tf = _fit_transform(table.y[:, None], "")
    x_tf = StandardizationTransform(x_tf.means, x_tf.scales, "train-x:" + x_tf.tag, x_tf.constant)
    y_tf = StandardizationTransform(y_tf.means, y_tf.scales, "train-y:" + y_tf.tag, y_tf.constant)
    return standardize_apply((x_tf, y_tf), table, table.feature_names), (x_tf, y_tf)


def standardize_apply(transforms, table: RawTable, feature_names=None) -> Dataset:
    """Map rows with previously fitted training transforms."""
    x_tf, y_tf = transforms
    if table.X.shape[1] != x_tf.means.size:
        raise DataError(f"table has {table.X.shape[1]} features, transform expects {x_tf.means.size}")
    return Dataset(
        x_tf.apply(table.X),
        y_tf.apply(table.y[:, None]).ravel(),
        tuple(feature_names or table.feature_names),
        x_tf,
        y_tf,
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def model_to_dict(model: TrainedGP) -> dict:
    data = model.dataset
    return {
        "format_version": FORMAT_VERSION,
        "kernel": format_kernel_expr(model.expr),
        "theta_log": model.theta.tolist(),
        "layout": layout(model.expr),
        "noise_slot": noise_slot(model.expr),
        "feature_names": list(data.feature_names),
        "target_name": model.meta.get("target_name"),
        "x_transform": data.x_transform.to_dict(),
        "y_transform": data.y_transform.to_dict(),
        "X": data.X.tolist(),
        "y": data.y.tolist(),
        "jitter_used": model.jitter,
        "lml_value": model.lml,
        **({"provenance": model.meta["provenance"]} if "provenance" in model.meta else {}),
    }


def model_from_dict(doc: dict) -> TrainedGP:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version!r}")
    expr = parse_kernel_expr(doc["kernel"])
    if doc.get("layout") != layout(expr) or doc.get("noise_slot") != noise_slot(expr):
        raise ModelFormatError("stored slot layout does not match the kernel string")
    data = Dataset(
        np.array(doc["X"], dtype=float),
        np.array(doc["y"], dtype=float),
        tuple(doc["feature_names"]),
        StandardizationTransform.from_dict(doc["x_transform"]),
        StandardizationTransform.from_dict(doc["y_transform"]),
    )
    model = fit_gp(expr, np.array(doc["theta_log"], dtype=float), data, jitter=float(doc["jitter_used"]))
    if abs(model.lml - float(doc["lml_value"])) > 1e-10:
        raise ModelFormatError(
            f"stored LML {doc['lml_value']} disagrees with recomputed {model.lml}"
        )
    meta = {"target_name": doc.get("target_name")}
    if "provenance" in doc:
        meta["provenance"] = doc["provenance"]
    return TrainedGP(model.expr, model.theta, model.chol, model.alpha, data, model.jitter, model.lml, meta)


def save_model(model: TrainedGP, path) -> None:
    atomic_write(path, json.dumps(model_to_dict(model), indent=1))


def load_model(path) -> TrainedGP:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_dict(doc)
