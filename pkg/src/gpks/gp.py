"""Exact GP regression with a zero prior mean on standardized targets."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .kernels import (
    KernelExpr,
    Pairwise,
    check_layout,
    gram_from_pairs,
    kernel_diag,
    noise_slot,
    pairwise,
)

__all__ = [
    "FactorizationError",
    "StandardizationTransform",
    "Dataset",
    "TrainedGP",
    "chol_with_jitter",
    "log_marginal_likelihood",
    "lml_gradient",
    "lml_and_gradient",
    "fit_gp",
    "posterior_predict",
    "predict_intervals",
]

_LOG_2PI = math.log(2 * math.pi)


class FactorizationError(RuntimeError):
    """Cholesky failed even with the largest jitter."""

    def __init__(self, message: str, jitter: float):
        super().__init__(message)
        self.jitter = jitter


@dataclass(frozen=True, eq=False)
class StandardizationTransform:
    """Per-column affine map ``z = (v - means) / scales``.

    ``tag`` identifies the data the transform was fitted on, so a test set can
    be checked against the training transform it was mapped with.
    """

    means: np.ndarray
    scales: np.ndarray
    tag: str = ""
    constant: tuple = ()

    def __post_init__(self):
        means = np.atleast_1d(np.asarray(self.means, dtype=float))
        scales = np.atleast_1d(np.asarray(self.scales, dtype=float))
        if means.shape != scales.shape:
            raise ValueError("means and scales must have the same shape")
        if not np.all(scales > 0):
            raise ValueError("standardization scales must be positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "scales", scales)
        if not self.tag:
            h = hashlib.sha256(means.tobytes() + scales.tobytes()).hexdigest()[:16]
            object.__setattr__(self, "tag", h)

    @classmethod
    def identity(cls, width: int = 1) -> "StandardizationTransform":
        return cls(np.zeros(width), np.ones(width), tag="identity")

    def apply(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.means) / self.scales

    def invert(self, values) -> np.ndarray:
        return np.asarray(values, dtype=float) * self.scales + self.means

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "scales": self.scales.tolist(),
            "tag": self.tag,
            "constant": list(self.constant),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationTransform":
        return cls(d["means"], d["scales"], d.get("tag", ""), tuple(d.get("constant", ())))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Inputs and targets in standardized units, with the maps back."""

    X: np.ndarray
    y: np.ndarray
    feature_names: tuple = ()
    x_transform: StandardizationTransform | None = None
    y_transform: StandardizationTransform | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float).ravel()
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError(f"X has shape {X.shape} but y has {y.shape[0]} entries")
        if y.shape[0] < 1:
            raise ValueError("dataset is empty")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains NaN or Inf")
        names = tuple(self.feature_names) or tuple(f"x{i}" for i in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise ValueError("feature_names does not match the number of columns")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "feature_names", names)
        if self.x_transform is None:
            object.__setattr__(self, "x_transform", StandardizationTransform.identity(X.shape[1]))
        if self.y_transform is None:
            object.__setattr__(self, "y_transform", StandardizationTransform.identity(1))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


def chol_with_jitter(K, max_rel_jitter: float = 1e-2):
    """Lower Cholesky factor of ``K``, adding diagonal jitter only if needed.

    Tries no jitter, then ``1e-8 * mean(diag K)`` growing tenfold up to
    ``max_rel_jitter * mean(diag K)``. Returns ``(L, jitter_used)``.
    """
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {K.shape}")
    if not np.all(np.isfinite(K)):
        raise FactorizationError("matrix contains non-finite entries", 0.0)
    scale = abs(float(np.mean(np.diag(K)))) or 1.0
    jitters = [0.0]
    rel = 1e-8
    while rel <= max_rel_jitter * (1 + 1e-9):
        jitters.append(rel * scale)
        rel *= 10
    eye = np.eye(K.shape[0])
    for jitter in jitters:
        try:
            return np.linalg.cholesky(K + jitter * eye if jitter else K), jitter
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError(
        f"matrix not positive definite even with jitter {jitters[-1]:.3g}", jitters[-1]
    )


def _noisy_gram(expr, theta, pw: Pairwise, want_grad: bool):
    theta = check_layout(expr, theta)
    try:
        noise_var = math.exp(2 * theta[noise_slot(expr)])
        with np.errstate(over="ignore", invalid="ignore"):
            if want_grad:
                K, dK = gram_from_pairs(expr, theta, pw, True)
            else:
                K, dK = gram_from_pairs(expr, theta, pw), None
    except OverflowError as exc:
        # extreme log-parameters are infeasible points, not crashes
        raise FactorizationError(f"kernel overflow: {exc}", 0.0) from exc
    Ky = K + noise_var * np.eye(K.shape[0])
    return Ky, dK, noise_var


def _lml_from_factor(L: np.ndarray, y: np.ndarray, alpha: np.ndarray) -> float:
    n = y.shape[0]
    return float(-0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * _LOG_2PI)


def lml_and_gradient(expr: KernelExpr, theta, X, y, pw: Pairwise | None = None):
    """Log marginal likelihood and its gradient over all slots.

    ``pw`` may carry precomputed pairwise arrays for ``X``; the optimizer
    passes them to avoid recomputing distances at every step.
    """
    y = np.asarray(y, dtype=float)
    pw = pairwise(X) if pw is None else pw
    Ky, dK, noise_var = _noisy_gram(expr, theta, pw, True)
    L, _ = chol_with_jitter(Ky)
    alpha = cho_solve((L, True), y)
    lml = _lml_from_factor(L, y, alpha)
    # W = alpha alpha^T - Ky^{-1}; Ky^{-1} comes from the Cholesky factor
    W = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(y.shape[0]))
    grad = np.empty(len(dK) + 1)
    for j, dKj in enumerate(dK):
        grad[j] = 0.5 * np.sum(W * dKj)
    grad[-1] = noise_var * np.trace(W)
    return lml, grad


def log_marginal_likelihood(expr: KernelExpr, theta, data: Dataset) -> float:
    Ky, _, _ = _noisy_gram(expr, theta, pairwise(data.X), False)
    L, _ = chol_with_jitter(Ky)
    alpha = cho_solve((L, True), data.y)
    return _lml_from_factor(L, data.y, alpha)


def lml_gradient(expr: KernelExpr, theta, data: Dataset) -> np.ndarray:
    return lml_and_gradient(expr, theta, data.X, data.y)[1]


@dataclass(frozen=True, eq=False)
class TrainedGP:
    expr: KernelExpr
    theta: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    dataset: Dataset
    jitter: float
    lml: float
    meta: dict = field(default_factory=dict)

    @property
    def noise_var(self) -> float:
        return math.exp(2 * self.theta[noise_slot(self.expr)])


def fit_gp(expr: KernelExpr, theta, data: Dataset, jitter: float | None = None) -> TrainedGP:
    """Factorize the training covariance at fixed hyperparameters.

    ``jitter=None`` searches the jitter ladder; a number forces that jitter
    (used when reloading a saved model).
    """
    theta = check_layout(expr, theta).copy()
    Ky, _, _ = _noisy_gram(expr, theta, pairwise(data.X), False)
    if jitter is None:
        L, jitter = chol_with_jitter(Ky)
    else:
        try:
            L = np.linalg.cholesky(Ky + jitter * np.eye(Ky.shape[0]) if jitter else Ky)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(str(exc), jitter) from exc
    alpha = cho_solve((L, True), data.y)
    return TrainedGP(expr, theta, L, alpha, data, float(jitter), _lml_from_factor(L, data.y, alpha))


def posterior_predict(model: TrainedGP, X_star, include_noise: bool = True):
    """Posterior mean and variance at standardized inputs ``X_star``."""
    X_star = np.asarray(X_star, dtype=float)
    if X_star.ndim == 1:
        X_star = X_star[:, None] if model.dataset.p == 1 else X_star[None, :]
    if X_star.shape[1] != model.dataset.p:
        raise ValueError(
            f"X_star has {X_star.shape[1]} columns, model expects {model.dataset.p}"
        )
    K_cross = gram_from_pairs(model.expr, model.theta, pairwise(model.dataset.X, X_star))
    mean = K_cross.T @ model.alpha
    v = solve_triangular(model.chol, K_cross, lower=True)
    var = kernel_diag(model.expr, model.theta, X_star) - np.sum(v * v, axis=0)
    var = np.where((var < 0) & (var >= -1e-10), 0.0, var)
    if include_noise:
        var = var + model.noise_var
    return mean, var


def predict_intervals(model: TrainedGP, X_star, k_sigma: float = 2.0):
    """``mean -/+ k_sigma * sd`` bounds (noise included), in target units."""
    if k_sigma < 0:
        raise ValueError("k_sigma must be non-negative")
    mean, var = posterior_predict(model, X_star, include_noise=True)
    tf = model.dataset.y_transform
    half = k_sigma * np.sqrt(np.maximum(var, 0.0)) * tf.scales[0]
    centre = tf.invert(mean)
    return centre - half, centre + half
