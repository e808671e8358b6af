import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpks.kernels import (
    BASE_KINDS,
    Kind,
    KernelSyntaxError,
    LayoutError,
    Leaf,
    Product,
    Sum,
    UnknownKernelError,
    check_layout,
    depth,
    eval_base,
    eval_expr,
    format_kernel_expr,
    grad_expr,
    gram_matrix,
    is_stationary,
    kernel_diag,
    layout,
    leaves,
    noise_slot,
    num_hyperparams,
    parse_kernel_expr,
    relabel,
)

SE, MA5, PE, LIN, RQ = (Leaf(k) for k in (Kind.SE, Kind.Ma5, Kind.Pe, Kind.Lin, Kind.RQ))


def P(text):
    return parse_kernel_expr(text)


def trees(max_depth):
    base = st.sampled_from(BASE_KINDS).map(Leaf)
    return st.recursive(
        base,
        lambda sub: st.builds(Sum, sub, sub) | st.builds(Product, sub, sub),
        max_leaves=2 ** (max_depth - 1),
    ).filter(lambda e: depth(e) <= max_depth).map(relabel)


# scalar reference formulas, written independently of the vectorized code
def se_ref(r, ell, sf):
    return sf**2 * math.exp(-(r**2) / (2 * ell**2))


def ma5_ref(r, ell, sf):
    u = math.sqrt(5) * r / ell
    return sf**2 * (1 + u + 5 * r**2 / (3 * ell**2)) * math.exp(-u)


def rq_ref(r, ell, alpha, sf):
    return sf**2 * (1 + r**2 / (2 * alpha * ell**2)) ** (-alpha)


class TestBaseKernels:
    def test_se_at_zero_distance(self):
        assert eval_base(Kind.SE, [0.3], [0.3], [0.7, 1.0]) == 1.0

    def test_ma5_at_zero_distance(self):
        for ell in (0.1, 1.0, 17.0):
            assert eval_base(Kind.Ma5, [2.0, -1.0], [2.0, -1.0], [ell, 1.0]) == pytest.approx(1.0)

    def test_pe_one_full_period(self):
        p = 1.7
        assert eval_base(Kind.Pe, [0.0], [p], [1.0, p, 1.0]) == pytest.approx(1.0, abs=1e-15)

    def test_se_at_one_lengthscale(self):
        ell = 1.3
        assert eval_base(Kind.SE, [0.0], [ell], [ell, 1.0]) == pytest.approx(math.exp(-0.5), rel=1e-15)

    def test_rq_approaches_se_for_large_alpha(self):
        for r in (0.2, 1.0, 2.5):
            se = eval_base(Kind.SE, [0.0], [r], [0.8, 1.0])
            rq = eval_base(Kind.RQ, [0.0], [r], [0.8, 1e6, 1.0])
            assert abs(se - rq) < 1e-4

    def test_lin_is_dot_product(self):
        assert eval_base(Kind.Lin, [1.0, 2.0], [3.0, -1.0], [2.0]) == pytest.approx(4.0 * 1.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_against_scalar_references(self, seed):
        rng = np.random.default_rng(seed)
        x, xp = rng.normal(size=3), rng.normal(size=3)
        r = float(np.linalg.norm(x - xp))
        ell, sf, alpha = rng.uniform(0.3, 3, size=3)
        assert eval_base(Kind.SE, x, xp, [ell, sf]) == pytest.approx(se_ref(r, ell, sf), rel=1e-13)
        assert eval_base(Kind.Ma5, x, xp, [ell, sf]) == pytest.approx(ma5_ref(r, ell, sf), rel=1e-13)
        assert eval_base(Kind.RQ, x, xp, [ell, alpha, sf]) == pytest.approx(
            rq_ref(r, ell, alpha, sf), rel=1e-13
        )

    def test_pe_matches_textbook_form_in_one_dimension(self):
        ell, p, sf = 0.9, 2.3, 1.4
        for d in (0.1, 0.77, 3.9):
            expected = sf**2 * math.exp(-2 * math.sin(math.pi * d / p) ** 2 / ell**2)
            assert eval_base(Kind.Pe, [0.0], [d], [ell, p, sf]) == pytest.approx(expected, rel=1e-13)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            eval_base(Kind.SE, [0.0, 1.0], [0.0], [1.0, 1.0])

    @pytest.mark.parametrize("params", [[0.0, 1.0], [1.0, -1.0]])
    def test_non_positive_parameter(self, params):
        with pytest.raises(ValueError):
            eval_base(Kind.SE, [0.0], [1.0], params)

    def test_stationary_kernels_are_translation_invariant(self):
        rng = np.random.default_rng(3)
        x, xp, shift = rng.normal(size=(3, 2))
        for kind, raw in ((Kind.SE, [1.1, 0.7]), (Kind.Ma5, [0.6, 1.2]), (Kind.Pe, [1.0, 1.3, 0.8]),
                          (Kind.RQ, [0.9, 2.0, 1.1])):
            assert eval_base(kind, x, xp, raw) == pytest.approx(eval_base(kind, x + shift, xp + shift, raw))


class TestExpressions:
    def test_sum_of_identical_se_at_zero_distance(self):
        e = P("SE + SE")
        assert eval_expr(e, [1.0], [1.0], np.zeros(5)) == pytest.approx(2.0)

    def test_product_with_lin_at_origin(self):
        assert eval_expr(P("Pe * Lin"), [0.0], [0.0], np.zeros(5)) == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_compositional_oracle(self, seed):
        rng = np.random.default_rng(seed)
        e = P("(Ma5 + Lin) * Pe")
        theta = rng.normal(scale=0.5, size=num_hyperparams(e))
        x, xp = rng.normal(size=2), rng.normal(size=2)
        raw = np.exp(theta)
        ma5 = eval_base(Kind.Ma5, x, xp, raw[0:2])
        lin = eval_base(Kind.Lin, x, xp, raw[2:3])
        pe = eval_base(Kind.Pe, x, xp, raw[3:6])
        assert eval_expr(e, x, xp, theta) == pytest.approx((ma5 + lin) * pe, rel=1e-13)

    def test_noise_slot_gradient_is_zero(self):
        e = P("SE * Pe + RQ")
        g = grad_expr(e, [0.3], [1.1], np.full(num_hyperparams(e), 0.2))
        assert g[noise_slot(e)] == 0.0

    def test_se_lengthscale_flat_at_zero_distance(self):
        assert grad_expr(SE, [0.5], [0.5], np.zeros(3))[0] == 0.0

    @pytest.mark.parametrize("text", ["SE", "Ma5", "Pe", "Lin", "RQ", "(Ma5 + Lin) * Pe + RQ", "RQ * SE * Pe"])
    def test_gradient_matches_finite_differences(self, text):
        e = P(text)
        rng = np.random.default_rng(len(text))
        theta = rng.normal(scale=0.4, size=num_hyperparams(e))
        x, xp = rng.normal(size=2), rng.normal(size=2)
        g = grad_expr(e, x, xp, theta)
        h = 1e-6
        for j in range(theta.size):
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            fd = (eval_expr(e, x, xp, tp) - eval_expr(e, x, xp, tm)) / (2 * h)
            assert g[j] == pytest.approx(fd, rel=1e-6, abs=1e-9)

    def test_stationarity(self):
        assert is_stationary(SE)
        assert not is_stationary(LIN)
        assert not is_stationary(P("SE + Lin"))
        assert is_stationary(P("SE * Pe + RQ + Ma5"))

    def test_hyperparameter_counts(self):
        assert num_hyperparams(SE) == 3
        assert num_hyperparams(P("Ma5 + Ma5")) == 5
        assert num_hyperparams(P("(Ma5 + Ma5) * Ma5")) == 7
        assert num_hyperparams(P("Pe + Lin + RQ")) == 3 + 1 + 3 + 1

    def test_layout_is_contiguous_left_to_right(self):
        e = P("Pe * (Lin + RQ)")
        recs = layout(e)
        assert [r["kind"] for r in recs] == ["Pe", "Lin", "RQ"]
        assert [tuple(r["slots"]) for r in recs] == [(0, 1, 2), (3,), (4, 5, 6)]
        assert noise_slot(e) == 7

    def test_layout_mismatch(self):
        with pytest.raises(LayoutError):
            check_layout(SE, np.zeros(4))
        with pytest.raises(LayoutError):
            eval_expr(SE, [0.0], [0.0], np.zeros(2))


class TestGram:
    def test_single_point(self):
        assert gram_matrix(SE, np.zeros(3), [[0.4]]).tolist() == [[1.0]]

    @pytest.mark.parametrize("text", ["SE", "(Ma5 + Lin) * Pe", "RQ + Pe * SE", "Lin * Lin"])
    def test_entrywise_matches_scalar_evaluation(self, text):
        e = P(text)
        rng = np.random.default_rng(7)
        A, B = rng.normal(size=(5, 2)), rng.normal(size=(4, 2))
        theta = rng.normal(scale=0.5, size=num_hyperparams(e))
        K = gram_matrix(e, theta, A, B)
        oracle = np.array([[eval_expr(e, a, b, theta) for b in B] for a in A])
        np.testing.assert_allclose(K, oracle, rtol=1e-12, atol=1e-14)

    def test_symmetric_when_a_is_b(self):
        e = P("Pe * RQ + Lin")
        X = np.random.default_rng(0).normal(size=(9, 3))
        K = gram_matrix(e, np.zeros(num_hyperparams(e)), X)
        assert np.array_equal(K, K.T)

    def test_diag_matches_gram(self):
        e = P("Pe * RQ + Lin + SE")
        X = np.random.default_rng(1).normal(size=(6, 2))
        theta = np.linspace(-0.5, 0.5, num_hyperparams(e))
        np.testing.assert_allclose(kernel_diag(e, theta, X), np.diag(gram_matrix(e, theta, X)), rtol=1e-14)

    @pytest.mark.parametrize("p", [1, 2, 5])
    def test_periodic_gram_is_positive_semidefinite(self, p):
        rng = np.random.default_rng(p)
        for _ in range(50):
            X = rng.normal(scale=2.0, size=(12, p))
            theta = rng.normal(scale=0.7, size=4)
            eig = np.linalg.eigvalsh(gram_matrix(PE, theta, X))
            assert eig.min() >= -1e-10 * eig.max()

    @settings(max_examples=60, deadline=None)
    @given(trees(3), st.integers(0, 10_000))
    def test_random_expressions_give_psd_grams(self, e, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(8, 2))
        theta = rng.normal(scale=0.5, size=num_hyperparams(e))
        K = gram_matrix(e, theta, X)
        eig = np.linalg.eigvalsh(K)
        assert eig.min() >= -1e-9 * max(1.0, eig.max())


class TestGrammar:
    def test_grouping_and_associativity(self):
        assert P("(Ma5 + Ma5) * Ma5") == relabel(Product(Sum(MA5, MA5), MA5))
        assert P("SE") == SE
        assert P("RQ + Pe + RQ") == relabel(Sum(Sum(RQ, PE), RQ))

    def test_product_binds_tighter(self):
        assert P("SE + Pe * Lin") == relabel(Sum(SE, Product(PE, LIN)))
        assert P("SE * Pe + Lin") == relabel(Sum(Product(SE, PE), LIN))

    def test_times_sign_alias(self):
        assert P("(Ma5 + Ma5) × Ma5") == P("(Ma5 + Ma5) * Ma5")

    def test_formatting(self):
        assert format_kernel_expr(relabel(Product(Sum(MA5, MA5), MA5))) == "(Ma5 + Ma5) * Ma5"
        assert format_kernel_expr(PE) == "Pe"
        assert format_kernel_expr(relabel(Sum(SE, Sum(LIN, PE)))) == "SE + (Lin + Pe)"
        assert format_kernel_expr(relabel(Product(SE, Product(LIN, PE)))) == "SE * (Lin * Pe)"

    def test_unknown_kernel(self):
        with pytest.raises(UnknownKernelError) as info:
            P("SE + Ma7")
        assert info.value.offset == 5

    @pytest.mark.parametrize("text", ["", "SE +", "(SE", "SE)", "SE Pe", "+ SE", "SE ** Pe", "()"])
    def test_syntax_errors(self, text):
        with pytest.raises(KernelSyntaxError):
            P(text)

    def test_whitespace_is_insignificant(self):
        assert P("  ( SE+Pe )*Lin ") == P("(SE + Pe) * Lin")

    @settings(max_examples=300, deadline=None)
    @given(trees(5))
    def test_round_trip(self, e):
        assert P(format_kernel_expr(e)) == e

    @settings(max_examples=100, deadline=None)
    @given(trees(4))
    def test_slot_count_matches_leaves(self, e):
        from gpks.kernels import SLOT_COUNT

        assert num_hyperparams(e) == sum(SLOT_COUNT[lf.kind] for lf in leaves(e)) + 1
