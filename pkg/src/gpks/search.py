"""Greedy level-wise composite kernel search.

Level 1 scores every base kernel. Each later level extends the incumbent by
one base kernel through ``+`` or ``*`` (new leaf on the right), warm-starts
the child from the incumbent's optimum, re-optimizes all slots and keeps the
best child if it beats the incumbent's score.
"""

from __future__ import annotations

import enum
import json
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .evidence import Criterion, EvidenceScore, HessianError, score_opt_result
from .gp import Dataset
from .kernels import (
    BASE_KINDS,
    Kind,
    KernelExpr,
    Leaf,
    Product,
    Sum,
    format_kernel_expr,
    n_slots,
    num_hyperparams,
)
from .optimize import AllRestartsFailed, OptimizerConfig, OptResult, optimize_hyperparams, warm_start_init

__all__ = [
    "Op",
    "SearchConfig",
    "SearchFailed",
    "CandidateRecord",
    "LevelTrace",
    "SearchResult",
    "CandidateScorer",
    "create_kernel",
    "greedy_search",
    "run_search_session",
    "default_workers",
]


class Op(enum.Enum):
    SUM = "+"
    PRODUCT = "*"


class SearchFailed(RuntimeError):
    pass


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("GPKS_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class SearchConfig:
    criterion: Criterion = Criterion.BIC
    base_kernels: tuple = BASE_KINDS
    operations: tuple = (Op.SUM, Op.PRODUCT)
    max_level: int = 3
    optimizer: OptimizerConfig = OptimizerConfig()
    early_stop: bool = True

    def __post_init__(self):
        if self.max_level < 1:
            raise ValueError("max_level must be >= 1")
        if not self.base_kernels:
            raise ValueError("base_kernels must not be empty")
        if len(set(self.base_kernels)) != len(self.base_kernels):
            raise ValueError("base_kernels contains duplicates")
        if not self.operations:
            raise ValueError("operations must not be empty")


@dataclass(frozen=True)
class CandidateRecord:
    expr: str
    score: float  # -inf marks an unscorable candidate
    lml: float
    m: int
    wall_time: float
    hessian_repaired: bool = False
    error: str | None = None

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "expr": self.expr,
            "score": self.score if math.isfinite(self.score) else None,
            "lml": self.lml if math.isfinite(self.lml) else None,
            "m": self.m,
            "hessian_repaired": self.hessian_repaired,
            "error": self.error,
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        return d


@dataclass(frozen=True)
class LevelTrace:
    level: int
    candidates: tuple
    chosen_index: int | None

    def to_dict(self, include_timing: bool = True) -> dict:
        return {
            "level": self.level,
            "candidates": [c.to_dict(include_timing) for c in self.candidates],
            "chosen_index": self.chosen_index,
        }


@dataclass(frozen=True, eq=False)
class SearchResult:
    criterion: Criterion
    best_expr: KernelExpr
    best_score: EvidenceScore
    best_opt: OptResult
    levels: tuple
    terminated_early: bool
    terminated_at_level: int

    def to_dict(self, include_timing: bool = False) -> dict:
        return {
            "criterion": self.criterion.value,
            "best_expr": format_kernel_expr(self.best_expr),
            "best_score": self.best_score.to_dict(),
            "best_lml": self.best_opt.lml,
            "best_theta_log": self.best_opt.theta.tolist(),
            "terminated_early": self.terminated_early,
            "terminated_at_level": self.terminated_at_level,
            "levels": [lv.to_dict(include_timing) for lv in self.levels],
        }

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)


def create_kernel(parent: KernelExpr, base: Kind, op: Op) -> KernelExpr:
    """``op(parent, base)`` with the new leaf on the right.

    The parent's slots keep their indices; the new leaf takes the slots that
    follow them, and the noise slot moves to the end.
    """
    leaf = Leaf(base, n_slots(parent))
    return Sum(parent, leaf) if op is Op.SUM else Product(parent, leaf)


@dataclass
class _Scored:
    expr: KernelExpr
    record: CandidateRecord
    score: EvidenceScore | None
    opt: OptResult | None


class CandidateScorer:
    """Optimizes and scores candidates, memoizing the criterion-free part.

    Optimization results are cached by (kernel string, warm start), so
    searches under different criteria that visit the same candidate share
    one optimization. Laplace scores are cached too.
    """

    def __init__(self, data: Dataset, optimizer: OptimizerConfig, workers: int | None = None):
        self.data = data
        self.optimizer = optimizer
        self.workers = default_workers() if workers is None else workers
        self._opt_cache: dict = {}
        self._score_cache: dict = {}
        self._lock = threading.Lock()

    def optimize(self, expr: KernelExpr, theta0: np.ndarray):
        key = (format_kernel_expr(expr), np.asarray(theta0, dtype=float).tobytes())
        with self._lock:
            if key in self._opt_cache:
                return self._opt_cache[key]
        t0 = time.perf_counter()
        try:
            value = optimize_hyperparams(expr, self.data, theta0, self.optimizer)
        except AllRestartsFailed as exc:
            value = exc
        entry = (value, time.perf_counter() - t0)
        with self._lock:
            self._opt_cache.setdefault(key, entry)
        return entry

    def score(self, expr: KernelExpr, theta0: np.ndarray, criterion: Criterion) -> _Scored:
        text = format_kernel_expr(expr)
        m = num_hyperparams(expr)
        opt, elapsed = self.optimize(expr, theta0)
        if isinstance(opt, Exception):
            record = CandidateRecord(text, -math.inf, -math.inf, m, elapsed, error=str(opt))
            return _Scored(expr, record, None, None)
        key = (text, opt.theta.tobytes(), criterion)
        t0 = time.perf_counter()
        with self._lock:
            score = self._score_cache.get(key)
        if score is None:
            try:
                score = score_opt_result(expr, opt, self.data, criterion)
            except HessianError as exc:
                record = CandidateRecord(text, -math.inf, opt.lml, m, elapsed, error=str(exc))
                return _Scored(expr, record, None, opt)
            with self._lock:
                self._score_cache[key] = score
        elapsed += time.perf_counter() - t0
        record = CandidateRecord(text, score.value, opt.lml, m, elapsed, score.hessian_repaired)
        return _Scored(expr, record, score, opt)

    def score_all(self, jobs, criterion: Criterion) -> list[_Scored]:
        if self.workers > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(lambda job: self.score(job[0], job[1], criterion), jobs))
        return [self.score(expr, theta0, criterion) for expr, theta0 in jobs]


def _pick(scored: list[_Scored]) -> int | None:
    best = None
    for i, s in enumerate(scored):
        if s.score is None:
            continue
        if best is None or s.score.value > scored[best].score.value:
            best = i
    return best


def greedy_search(data: Dataset, config: SearchConfig, scorer: CandidateScorer | None = None) -> SearchResult:
    if scorer is None:
        scorer = CandidateScorer(data, config.optimizer)
    criterion = config.criterion

    jobs = [(Leaf(kind), np.zeros(num_hyperparams(Leaf(kind)))) for kind in config.base_kernels]
    scored = scorer.score_all(jobs, criterion)
    chosen = _pick(scored)
    levels = [LevelTrace(1, tuple(s.record for s in scored), chosen)]
    if chosen is None:
        raise SearchFailed("no base kernel could be scored")

    best = scored[chosen]
    best_level = 1
    parent = best
    terminated_early = False
    for level in range(2, config.max_level + 1):
        jobs = []
        for kind in config.base_kernels:
            for op in config.operations:
                child = create_kernel(parent.expr, kind, op)
                jobs.append((child, warm_start_init(parent.opt, child)))
        scored = scorer.score_all(jobs, criterion)
        chosen = _pick(scored)
        improved = chosen is not None and scored[chosen].score.value > best.score.value
        levels.append(LevelTrace(level, tuple(s.record for s in scored), chosen if improved else None))
        if improved:
            best, best_level = scored[chosen], level
            parent = best
        elif config.early_stop or chosen is None:
            terminated_early = True
            break
        else:
            # keep exploring from this level's best; the overall best stays put
            parent = scored[chosen]

    return SearchResult(
        criterion=criterion,
        best_expr=best.expr,
        best_score=best.score,
        best_opt=best.opt,
        levels=tuple(levels),
        terminated_early=terminated_early,
        terminated_at_level=best_level,
    )


@dataclass
class SessionEntry:
    config: SearchConfig
    result: SearchResult | None = None
    error: str | None = None


def run_search_session(data: Dataset, configs, workers: int | None = None) -> list[SessionEntry]:
    """Run one search per config, sharing optimizations between them.

    Failures are isolated: an entry carries either a result or an error.
    """
    configs = list(configs)
    scorers: dict = {}
    entries = []
    for config in configs:
        scorer = scorers.get(config.optimizer)
        if scorer is None:
            scorer = scorers[config.optimizer] = CandidateScorer(data, config.optimizer, workers)
        try:
            entries.append(SessionEntry(config, greedy_search(data, config, scorer)))
        except (SearchFailed, ValueError) as exc:
            entries.append(SessionEntry(config, error=f"{type(exc).__name__}: {exc}"))
    return entries
