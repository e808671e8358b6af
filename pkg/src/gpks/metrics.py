"""Point and interval accuracy metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .gp import Dataset, TrainedGP, posterior_predict, predict_intervals

__all__ = [
    "MetricError",
    "EvalReport",
    "rmse",
    "mape",
    "picp",
    "mpiw",
    "nominal_coverage",
    "evaluate",
    "format_table",
]

COLUMNS = ("RMSE", "MAPE", "PICP", "MPIW")


class MetricError(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise MetricError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise MetricError("empty input")
    return a, b


def _bounds(lower, upper):
    lower, upper = _pair(lower, upper)
    if np.any(lower > upper):
        raise MetricError(f"{int(np.sum(lower > upper))} intervals have lower > upper")
    return lower, upper


def rmse(y_true, y_pred) -> float:
    y_true, y_pred = _pair(y_true, y_pred)
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)))


def mape(y_true, y_pred, zero_tol: float = 1e-12) -> tuple[float, int]:
    """Mean absolute percentage error, skipping targets with ``|y| <= zero_tol``.

    Returns the value in percent and the number of skipped targets.
    """
    y_true, y_pred = _pair(y_true, y_pred)
    keep = np.abs(y_true) > zero_tol
    if not np.any(keep):
        raise MetricError("MAPE undefined: every target is zero")
    err = np.abs(y_true[keep] - y_pred[keep]) / np.abs(y_true[keep])
    return float(100 * np.mean(err)), int(np.sum(~keep))


def picp(y_true, lower, upper) -> float:
    """Percentage of targets inside ``[lower, upper]`` (bounds inclusive)."""
    lower, upper = _bounds(lower, upper)
    y_true, _ = _pair(y_true, lower)
    inside = (lower <= y_true) & (y_true <= upper)
    return float(100 * np.mean(inside))


def mpiw(lower, upper) -> float:
    lower, upper = _bounds(lower, upper)
    return float(np.mean(upper - lower))


def nominal_coverage(k_sigma: float) -> float:
    """Gaussian coverage of +-k_sigma in percent, to one decimal (95.4 at 2)."""
    return round(100 * math.erf(k_sigma / math.sqrt(2)), 1)


@dataclass(frozen=True)
class EvalReport:
    rmse: float
    mape: float
    picp: float
    mpiw: float
    n_test: int
    n_excluded_mape: int
    nominal_coverage: float

    def to_dict(self) -> dict:
        return asdict(self)

    def row(self) -> tuple:
        return (self.rmse, self.mape, self.picp, self.mpiw)


def evaluate(model: TrainedGP, test: Dataset, k_sigma: float = 2.0) -> EvalReport:
    """Score ``model`` on a test set mapped with the model's own transforms."""
    train = model.dataset
    if test.feature_names != train.feature_names:
        raise MetricError(
            f"test features {list(test.feature_names)} do not match "
            f"training features {list(train.feature_names)}"
        )
    if test.y_transform.tag != train.y_transform.tag or test.x_transform.tag != train.x_transform.tag:
        raise MetricError("test set was not standardized with the training transforms")
    mean, _ = posterior_predict(model, test.X, include_noise=True)
    lower, upper = predict_intervals(model, test.X, k_sigma)
    y_true = train.y_transform.invert(test.y)
    y_pred = train.y_transform.invert(mean)
    mape_value, excluded = mape(y_true, y_pred)
    return EvalReport(
        rmse=rmse(y_true, y_pred),
        mape=mape_value,
        picp=picp(y_true, lower, upper),
        mpiw=mpiw(lower, upper),
        n_test=int(y_true.size),
        n_excluded_mape=excluded,
        nominal_coverage=nominal_coverage(k_sigma),
    )


def format_table(rows) -> str:
    """Aligned text table; ``rows`` is an iterable of ``(name, EvalReport)``."""
    rows = list(rows)
    width = max([len("Model")] + [len(name) for name, _ in rows])
    lines = [f"{'Model':<{width}}  " + "  ".join(f"{c:>10}" for c in COLUMNS)]
    for name, report in rows:
        lines.append(f"{name:<{width}}  " + "  ".join(f"{v:>10.4f}" for v in report.row()))
    if rows:
        lines.append(f"nominal coverage: {rows[0][1].nominal_coverage}%")
    return "\n".join(lines) + "\n"
