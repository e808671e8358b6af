"""Approximate log model evidence: AIC, BIC and Laplace.

All three are on the log-evidence scale, so higher is better for each.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .gp import Dataset, FactorizationError, lml_and_gradient
from .kernels import KernelExpr, num_hyperparams, pairwise
from .optimize import OptimizerConfig, OptResult, optimize_hyperparams

__all__ = [
    "Criterion",
    "EvidenceScore",
    "HessianError",
    "aic_log_evidence",
    "bic_log_evidence",
    "log_prior",
    "log_prior_gradient",
    "hessian_fd",
    "laplace_from_hessian",
    "laplace_log_evidence",
    "score_opt_result",
    "approx_model_evidence",
]

_LOG_2PI = math.log(2 * math.pi)
EIGEN_FLOOR = 1e-8


class Criterion(enum.Enum):
    AIC = "aic"
    BIC = "bic"
    LAPLACE = "laplace"

    @property
    def label(self) -> str:
        return {"aic": "CK-AIC", "bic": "CK-BIC", "laplace": "CK-Lap"}[self.value]


class HessianError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvidenceScore:
    value: float
    criterion: Criterion
    m: int
    hessian_repaired: bool = False

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "criterion": self.criterion.value,
            "m": self.m,
            "hessian_repaired": self.hessian_repaired,
        }


def aic_log_evidence(lml_hat: float, m: int) -> float:
    if m < 1:
        raise ValueError("m must be >= 1")
    return lml_hat - m


def bic_log_evidence(lml_hat: float, m: int, n: int) -> float:
    if m < 1 or n < 2:
        raise ValueError("need m >= 1 and n >= 2")
    return lml_hat - 0.5 * m * math.log(n)


def log_prior(theta) -> float:
    """Independent standard normal density over the log-hyperparameters."""
    theta = np.asarray(theta, dtype=float)
    return float(-0.5 * theta.size * _LOG_2PI - 0.5 * theta @ theta)


def log_prior_gradient(theta) -> np.ndarray:
    return -np.asarray(theta, dtype=float)


def hessian_fd(gradient_fn, theta_hat, step: float = 1e-4) -> np.ndarray:
    """Negative Hessian by central differences of ``gradient_fn``.

    Column ``j`` uses the step ``step * max(1, |theta_j|)``. The result is
    symmetrized.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    m = theta_hat.size
    H = np.empty((m, m))
    for j in range(m):
        h = step * max(1.0, abs(theta_hat[j]))
        e = np.zeros(m)
        e[j] = h
        try:
            g_plus = np.asarray(gradient_fn(theta_hat + e), dtype=float)
            g_minus = np.asarray(gradient_fn(theta_hat - e), dtype=float)
        except FactorizationError as exc:
            raise HessianError(f"gradient probe failed along slot {j}: {exc}") from exc
        H[:, j] = (g_plus - g_minus) / (2 * h)
    return -0.5 * (H + H.T)


def laplace_from_hessian(lml_hat: float, theta_hat, H) -> tuple[float, bool]:
    """Laplace log evidence from a negative Hessian; also returns the repair flag.

    Eigenvalues of ``H`` below ``EIGEN_FLOOR`` are raised to it.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    eig = np.linalg.eigvalsh(np.asarray(H, dtype=float))
    repaired = bool(np.any(eig < EIGEN_FLOOR))
    eig = np.maximum(eig, EIGEN_FLOOR)
    m = theta_hat.size
    value = lml_hat + log_prior(theta_hat) + 0.5 * m * _LOG_2PI - 0.5 * float(np.sum(np.log(eig)))
    return value, repaired


def laplace_log_evidence(expr: KernelExpr, opt: OptResult, data: Dataset, step: float = 1e-4) -> EvidenceScore:
    pw = pairwise(data.X)

    def grad(theta):
        return lml_and_gradient(expr, theta, None, data.y, pw)[1] + log_prior_gradient(theta)

    H = hessian_fd(grad, opt.theta, step)
    value, repaired = laplace_from_hessian(opt.lml, opt.theta, H)
    return EvidenceScore(value, Criterion.LAPLACE, num_hyperparams(expr), repaired)


def score_opt_result(expr: KernelExpr, opt: OptResult, data: Dataset, criterion: Criterion) -> EvidenceScore:
    """Score an already optimized kernel under ``criterion``."""
    m = num_hyperparams(expr)
    if criterion is Criterion.AIC:
        return EvidenceScore(aic_log_evidence(opt.lml, m), criterion, m)
    if criterion is Criterion.BIC:
        return EvidenceScore(bic_log_evidence(opt.lml, m, data.n), criterion, m)
    return laplace_log_evidence(expr, opt, data)


def approx_model_evidence(
    data: Dataset,
    expr: KernelExpr,
    criterion: Criterion,
    theta0,
    opt_config: OptimizerConfig = OptimizerConfig(),
) -> tuple[EvidenceScore, OptResult]:
    opt = optimize_hyperparams(expr, data, theta0, opt_config)
    return score_opt_result(expr, opt, data, criterion), opt
