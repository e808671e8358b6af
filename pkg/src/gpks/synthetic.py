"""Seeded synthetic data generators for demos and tests."""

from __future__ import annotations

import math
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .gp import chol_with_jitter
from .kernels import KernelExpr, gram_matrix, noise_slot

# bundled demo series written by residual_load(); columns timestamp,residual_load
RESIDUAL_LOAD_CSV = Path(__file__).parent / "datasets" / "residual_load.csv"


def gp_sample(expr: KernelExpr, theta, X, seed: int = 0) -> np.ndarray:
    """One noisy draw ``y ~ N(0, K + noise I)`` at the rows of ``X``."""
    rng = np.random.default_rng(seed)
    theta = np.asarray(theta, dtype=float)
    K = gram_matrix(expr, theta, X)
    L, _ = chol_with_jitter(K)
    noise_sd = math.exp(theta[noise_slot(expr)])
    return L @ rng.standard_normal(K.shape[0]) + noise_sd * rng.standard_normal(K.shape[0])


def lin_plus_periodic(n: int = 200, seed: int = 0, slope: float = 0.3, period: float = 1.5,
                      x_max: float = 10.0, noise_ratio: float = 0.1):
    """Linear trend plus a sinusoid on ``[0, x_max]`` with noise sd ``noise_ratio * sd(signal)``."""
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0.0, x_max, n))
    signal = slope * x + np.sin(2 * math.pi * x / period)
    y = signal + noise_ratio * signal.std() * rng.standard_normal(n)
    return x, y


def white_noise(n: int = 100, p: int = 1, seed: int = 0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-3, 3, size=(n, p)), rng.standard_normal(n)


def residual_load(hours: int = 288, seed: int = 0, start: datetime = datetime(2023, 6, 5)):
    """Hourly load minus PV production in kW, with daily and weekly cycles."""
    rng = np.random.default_rng(seed)
    stamps = [start + timedelta(hours=h) for h in range(hours)]
    load, pv = [], []
    for ts in stamps:
        h = ts.hour
        weekend = ts.isoweekday() >= 6
        base = 40 + 15 * math.exp(-((h - 8) ** 2) / 6) + 20 * math.exp(-((h - 18) ** 2) / 8)
        load.append(base * (0.85 if weekend else 1.0))
        pv.append(max(0.0, 30 * math.sin(math.pi * (h - 6) / 14)) if 6 <= h <= 20 else 0.0)
    cloud = np.clip(1 - 0.3 * np.abs(rng.standard_normal(hours // 24 + 1)), 0.2, 1.0)
    pv = np.array(pv) * np.repeat(cloud, 24)[:hours]
    values = np.array(load) - pv + 2.0 * rng.standard_normal(hours)
    return stamps, values
