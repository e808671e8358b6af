import json
import math

import numpy as np
import pytest

from gpks.evidence import Criterion, approx_model_evidence
from gpks.gp import Dataset
from gpks.kernels import Kind, Leaf, format_kernel_expr, num_hyperparams, parse_kernel_expr
from gpks.optimize import OptimizerConfig
from gpks.search import (
    CandidateScorer,
    Op,
    SearchConfig,
    SearchFailed,
    create_kernel,
    greedy_search,
    run_search_session,
)
from gpks.synthetic import white_noise

FAST = OptimizerConfig(restarts=1, max_iters=60)


def smooth_data(n=30, seed=0):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(-2, 2, n))
    return Dataset(x[:, None], np.sin(2 * x) + 0.1 * rng.normal(size=n))


class TestCreateKernel:
    def test_nested_structures(self):
        k = create_kernel(Leaf(Kind.Ma5), Kind.Ma5, Op.SUM)
        k = create_kernel(k, Kind.Ma5, Op.PRODUCT)
        assert format_kernel_expr(k) == "(Ma5 + Ma5) * Ma5"
        k = create_kernel(parse_kernel_expr("RQ + Pe"), Kind.RQ, Op.SUM)
        assert format_kernel_expr(k) == "RQ + Pe + RQ"

    def test_new_leaf_takes_following_slots(self):
        k = create_kernel(parse_kernel_expr("Pe * Lin"), Kind.SE, Op.SUM)
        assert k == parse_kernel_expr("Pe * Lin + SE")
        assert num_hyperparams(k) == 3 + 1 + 2 + 1


class TestGreedySearch:
    def test_level_one_is_exhaustive_argmax(self):
        data = smooth_data()
        res = greedy_search(data, SearchConfig(max_level=1, optimizer=FAST))
        scores = {}
        for kind in (Kind.SE, Kind.Ma5, Kind.Pe, Kind.Lin, Kind.RQ):
            e = Leaf(kind)
            s, _ = approx_model_evidence(data, e, Criterion.BIC, np.zeros(num_hyperparams(e)), FAST)
            scores[kind.value] = s.value
        assert format_kernel_expr(res.best_expr) == max(scores, key=scores.get)
        assert [c.score for c in res.levels[0].candidates] == list(scores.values())
        assert not res.terminated_early
        assert res.terminated_at_level == 1

    def test_levels_and_trace_shape(self):
        res = greedy_search(smooth_data(), SearchConfig(max_level=2, optimizer=FAST))
        assert res.levels[0].level == 1 and len(res.levels[0].candidates) == 5
        if len(res.levels) > 1:
            assert len(res.levels[1].candidates) == 10
            parent = res.levels[0].candidates[res.levels[0].chosen_index].expr
            assert all(c.expr.startswith(parent + " ") for c in res.levels[1].candidates)

    def test_children_never_lower_the_incumbent(self):
        res = greedy_search(smooth_data(40, 2), SearchConfig(max_level=3, optimizer=FAST))
        chosen = [lv.candidates[lv.chosen_index].score for lv in res.levels if lv.chosen_index is not None]
        assert chosen == sorted(chosen)
        assert res.best_score.value == chosen[-1]

    def test_white_noise_terminates_early(self):
        X, y = white_noise(60, 1, seed=0)
        res = greedy_search(Dataset(X, y), SearchConfig(criterion=Criterion.BIC, max_level=3, optimizer=FAST))
        assert res.terminated_early
        assert res.terminated_at_level == 1
        assert len(res.levels) == 2

    def test_without_early_stop_explores_all_levels(self):
        X, y = white_noise(40, 1, seed=1)
        cfg = SearchConfig(max_level=3, optimizer=FAST, early_stop=False, base_kernels=(Kind.SE, Kind.Lin))
        res = greedy_search(Dataset(X, y), cfg)
        assert len(res.levels) == 3

    def test_unscorable_candidates_are_skipped(self, monkeypatch):
        import gpks.search as search
        from gpks.optimize import AllRestartsFailed

        real = search.optimize_hyperparams

        def flaky(expr, data, theta0, config):
            if "Pe" in format_kernel_expr(expr):
                raise AllRestartsFailed("forced")
            return real(expr, data, theta0, config)

        monkeypatch.setattr(search, "optimize_hyperparams", flaky)
        res = greedy_search(smooth_data(), SearchConfig(max_level=1, optimizer=FAST))
        pe = [c for c in res.levels[0].candidates if c.expr == "Pe"][0]
        assert pe.score == -math.inf and pe.error
        assert json.loads(res.to_json())["levels"][0]["candidates"][2]["score"] is None
        assert format_kernel_expr(res.best_expr) != "Pe"

    def test_all_level_one_failures(self, monkeypatch):
        import gpks.search as search
        from gpks.optimize import AllRestartsFailed

        def fail(*a, **k):
            raise AllRestartsFailed("forced")

        monkeypatch.setattr(search, "optimize_hyperparams", fail)
        with pytest.raises(SearchFailed):
            greedy_search(smooth_data(), SearchConfig(max_level=2, optimizer=FAST))

    def test_deterministic_json(self):
        data = smooth_data(25, 4)
        cfg = SearchConfig(max_level=2, optimizer=OptimizerConfig(restarts=2, seed=3, max_iters=60))
        a = greedy_search(data, cfg).to_json()
        b = greedy_search(data, cfg).to_json()
        assert a == b
        assert "wall_time" not in a

    def test_threaded_scoring_matches_serial(self):
        data = smooth_data(25, 5)
        cfg = SearchConfig(max_level=2, optimizer=FAST)
        serial = greedy_search(data, cfg, CandidateScorer(data, FAST, workers=1)).to_json()
        threaded = greedy_search(data, cfg, CandidateScorer(data, FAST, workers=3)).to_json()
        assert serial == threaded

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SearchConfig(max_level=0)
        with pytest.raises(ValueError):
            SearchConfig(base_kernels=(Kind.SE, Kind.SE))


class TestSession:
    def test_criteria_share_likelihoods(self):
        data = smooth_data(30, 6)
        cfgs = [SearchConfig(criterion=c, max_level=2, optimizer=FAST) for c in (Criterion.AIC, Criterion.BIC)]
        aic, bic = run_search_session(data, cfgs)
        a1, b1 = aic.result.levels[0].candidates, bic.result.levels[0].candidates
        for ca, cb in zip(a1, b1):
            assert ca.lml == cb.lml
            assert ca.score - cb.score == pytest.approx(0.5 * ca.m * math.log(data.n) - ca.m, abs=1e-12)

    def test_failures_are_isolated(self, monkeypatch):
        import gpks.search as search
        from gpks.optimize import AllRestartsFailed

        real = search.optimize_hyperparams

        def picky(expr, data, theta0, config):
            if config.seed == 99:
                raise AllRestartsFailed("forced")
            return real(expr, data, theta0, config)

        monkeypatch.setattr(search, "optimize_hyperparams", picky)
        bad = OptimizerConfig(restarts=1, max_iters=60, seed=99)
        entries = run_search_session(
            smooth_data(), [SearchConfig(max_level=1, optimizer=bad), SearchConfig(max_level=1, optimizer=FAST)]
        )
        assert entries[0].result is None and "SearchFailed" in entries[0].error
        assert entries[1].result is not None
