"""LML maximization by BFGS ascent with seeded restarts and warm starts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .gp import Dataset, FactorizationError, lml_and_gradient
from .kernels import (
    KernelExpr,
    Leaf,
    LayoutError,
    check_layout,
    format_kernel_expr,
    n_slots,
    num_hyperparams,
    pairwise,
)

__all__ = [
    "OptimizerConfig",
    "OptResult",
    "AllRestartsFailed",
    "bfgs_ascent",
    "optimize_hyperparams",
    "warm_start_init",
]

log = logging.getLogger(__name__)

ARMIJO_C = 1e-4
MAX_HALVINGS = 50
# Largest allowed move of any log-hyperparameter in one iteration.
MAX_STEP = 3.0


class AllRestartsFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 200
    grad_tol: float = 1e-5
    restarts: int = 3
    restart_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be > 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")

    def start_points(self, theta0: np.ndarray) -> list[np.ndarray]:
        rng = np.random.default_rng(self.seed)
        starts = [theta0.copy()]
        for _ in range(self.restarts - 1):
            eps = rng.uniform(-self.restart_scale, self.restart_scale, size=theta0.shape)
            starts.append(theta0 + eps)
        return starts


@dataclass(frozen=True, eq=False)
class OptResult:
    expr: KernelExpr
    theta: np.ndarray
    lml: float
    iterations: int
    converged: bool
    restart_index: int
    grad: np.ndarray = field(default=None, repr=False)
    failed_restarts: tuple = ()


def bfgs_ascent(fg, x0, max_iters: int = 200, grad_tol: float = 1e-5):
    """Maximize ``f`` from ``x0`` with an inverse-Hessian BFGS update.

    ``fg(x)`` returns ``(f, grad)`` and may raise :class:`FactorizationError`;
    failing trial points count as ``-inf`` and shrink the step. The start
    point must be feasible. Returns ``(x, f, g, iterations, converged)``.
    """
    x = np.array(x0, dtype=float)
    f, g = fg(x)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise FactorizationError("objective not finite at start point", 0.0)
    m = x.shape[0]
    H = np.eye(m)
    fresh = True
    it = 0
    while it < max_iters:
        if np.max(np.abs(g)) < grad_tol:
            break
        d = H @ g
        slope = g @ d
        if not slope > 0:
            H, fresh = np.eye(m), True
            d = g.copy()
            slope = g @ g
        biggest = np.max(np.abs(d))
        if biggest > MAX_STEP:
            d *= MAX_STEP / biggest
            slope *= MAX_STEP / biggest

        t = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS):
            x_new = x + t * d
            try:
                f_new, g_new = fg(x_new)
            except FactorizationError:
                f_new = -np.inf
            if np.isfinite(f_new) and np.all(np.isfinite(g_new)) and f_new >= f + ARMIJO_C * t * slope:
                accepted = True
                break
            t *= 0.5
        it += 1
        if not accepted:
            if fresh:
                break
            H, fresh = np.eye(m), True
            continue

        s = x_new - x
        yv = g - g_new  # gradient change of the minimized objective -f
        sy = s @ yv
        if sy > max(1e-12 * np.linalg.norm(s) * np.linalg.norm(yv), 1e-100):
            if fresh:
                H = np.eye(m) * (sy / (yv @ yv))
            rho = 1.0 / sy
            Hy = H @ yv
            H = H + ((sy + yv @ Hy) * rho * rho) * np.outer(s, s) - rho * (
                np.outer(Hy, s) + np.outer(s, Hy)
            )
            fresh = False
        stalled = f_new - f <= 1e-15 * max(1.0, abs(f)) and np.max(np.abs(s)) < 1e-12
        x, f, g = x_new, f_new, g_new
        if stalled:
            break
    return x, f, g, it, bool(np.max(np.abs(g)) < grad_tol)


def optimize_hyperparams(
    expr: KernelExpr, data: Dataset, theta0, config: OptimizerConfig = OptimizerConfig()
) -> OptResult:
    """Maximize the LML over log-hyperparameters from ``theta0`` plus restarts.

    The first start is ``theta0`` itself; the others perturb it uniformly by
    up to ``restart_scale`` with a generator seeded from ``config.seed``.
    The best LML wins, ties going to the lowest restart index.
    """
    theta0 = check_layout(expr, theta0)
    pw = pairwise(data.X)
    y = data.y

    def fg(theta):
        return lml_and_gradient(expr, theta, None, y, pw)

    best = None
    failed = []
    for index, start in enumerate(config.start_points(theta0)):
        try:
            x, f, g, iters, converged = bfgs_ascent(fg, start, config.max_iters, config.grad_tol)
        except FactorizationError as exc:
            log.debug("restart %d of %s failed: %s", index, format_kernel_expr(expr), exc)
            failed.append(index)
            continue
        if best is None or f > best.lml:
            best = OptResult(expr, x, float(f), iters, converged, index, g)
    if best is None:
        raise AllRestartsFailed(
            f"every start point failed to factorize for {format_kernel_expr(expr)}"
        )
    if failed:
        best = OptResult(
            best.expr, best.theta, best.lml, best.iterations, best.converged,
            best.restart_index, best.grad, tuple(failed),
        )
    return best


def warm_start_init(parent: OptResult | None, child_expr: KernelExpr) -> np.ndarray:
    """Initial log-hyperparameters for a child kernel.

    Slots inherited from the parent copy its optimized values, the noise slot
    included; slots of the newly attached leaf start at zero (raw value 1).
    """
    m = num_hyperparams(child_expr)
    if parent is None:
        return np.zeros(m)
    pexpr = parent.expr
    if isinstance(child_expr, Leaf) or child_expr.left != pexpr or not isinstance(
        child_expr.right, Leaf
    ):
        raise LayoutError(
            f"{format_kernel_expr(child_expr)} is not a one-leaf extension of "
            f"{format_kernel_expr(pexpr)}"
        )
    k = n_slots(pexpr)
    if child_expr.right.slot != k:
        raise LayoutError("new leaf must take the slots right after the parent's")
    theta = np.zeros(m)
    theta[:k] = parent.theta[:k]
    theta[-1] = parent.theta[-1]
    return theta
