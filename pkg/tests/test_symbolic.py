import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from physop import symbolic as sym
from physop.symbolic import (
    Const,
    Family,
    Leaf,
    Op,
    build_residual,
    decode_constant,
    encode_constant,
    eval_residual,
    parse,
    required_derivatives,
    serialize,
    to_text,
)

from oracles import closed_form_residual


def text(tokens):
    return to_text(tokens)


class TestConstants:
    def test_paper_example(self):
        assert text(encode_constant(0.514)) == "add N514 E-3"

    def test_zero_and_one(self):
        assert text(encode_constant(0.0)) == "add N0 E0"
        assert text(encode_constant(1.0)) == "add N1 E0"

    def test_negative(self):
        _, m, e = encode_constant(-123456.7)
        assert decode_constant(m.payload, e.payload) == -123456.7

    @pytest.mark.parametrize("bad", [math.inf, -math.inf, math.nan, 1e15, -2e16])
    def test_invalid(self, bad):
        with pytest.raises(sym.InvalidConstant):
            encode_constant(bad)

    @given(st.floats(min_value=-1e14, max_value=1e14, allow_nan=False).filter(lambda v: v != 0))
    def test_decode_relative_error(self, v):
        _, m, e = encode_constant(v)
        assert abs(m.payload) < 10**sym.MANTISSA_DIGITS
        back = decode_constant(m.payload, e.payload)
        assert abs(back - v) <= 5e-7 * abs(v)

    @given(st.floats(min_value=-1e14, max_value=1e14, allow_nan=False))
    def test_quantize_idempotent(self, v):
        once = sym.quantize_constant(v)
        assert sym.quantize_constant(once) == once


class TestParse:
    def test_single_leaf(self):
        assert parse("u_t") == Leaf("u_t")

    def test_advection(self):
        tree = parse("add u_t mul add N514 E-3 u_x")
        assert tree == Op("add", Leaf("u_t"), Op("mul", Const(0.514), Leaf("u_x")))
        assert tree.children[1].children[0].value == 0.514

    def test_wave(self):
        tree = parse("sub u_tt mul add N25 E-2 u_xx")
        assert tree == Op("sub", Leaf("u_tt"), Op("mul", Const(0.25), Leaf("u_xx")))

    def test_add_of_two_leaves_is_arithmetic(self):
        tree = parse("add u u_x")
        assert tree.kind == "operator" and tree.name == "add"

    def test_truncated(self):
        with pytest.raises(sym.UnexpectedEnd):
            parse("add u_t mul add N5 E-1")

    def test_trailing(self):
        with pytest.raises(sym.TrailingTokens):
            parse("u_t u_x")

    def test_unknown_token(self):
        with pytest.raises(sym.MalformedExpression):
            parse("add u_t foo")

    def test_empty(self):
        with pytest.raises(sym.SymbolicError):
            parse("")


class TestSerialize:
    def test_leaf(self):
        assert text(serialize(Leaf("u"))) == "u"

    def test_advection(self):
        tree = Op("add", Leaf("u_t"), Op("mul", Const(0.514), Leaf("u_x")))
        assert text(serialize(tree)) == "add u_t mul add N514 E-3 u_x"

    def test_diff_lin(self):
        expr = build_residual("Diff-Lin", (0.003, 0.1))
        assert expr.text == "sub u_t add mul add N3 E-3 u_xx mul add N1 E-1 u"
        assert parse(expr.text) == expr.tree


class TestBuildResidual:
    def test_advection(self):
        assert build_residual("Adv", (0.5,)).text == "add u_t mul add N5 E-1 u_x"

    def test_sine_gordon(self):
        assert build_residual("SG", (1.0,)).text == "sub add u_tt mul add N1 E0 sin u u_xx"

    def test_burgers_against_oracle(self):
        expr = build_residual("Burgers", (1.0, 0.01))
        Z = np.random.default_rng(0).uniform(-1, 1, (32, 5))
        ref = Z[:, 1] + Z[:, 0] * Z[:, 3] - sym.quantize_constant(0.01 / math.pi) * Z[:, 4]
        np.testing.assert_allclose(eval_residual(expr.tree, Z), ref, rtol=0, atol=1e-14)

    def test_only_channel_leaves(self):
        for fam in Family:
            expr = build_residual(fam, fam.spec.centers)
            assert sym.leaves(expr.tree) <= set(sym.CHANNELS)

    def test_unknown_family(self):
        with pytest.raises(sym.UnknownFamily):
            build_residual("Heat", (1.0,))

    def test_wrong_param_count(self):
        with pytest.raises(ValueError):
            build_residual("Adv", (1.0, 2.0))


class TestRequiredDerivatives:
    @pytest.mark.parametrize(
        "fam, want",
        [
            ("Adv", {"u_t", "u_x"}),
            ("Diff", {"u_t", "u_xx"}),
            ("KG", {"u_tt", "u_xx"}),
            ("Burgers", {"u_t", "u_x", "u_xx"}),
        ],
    )
    def test_sets(self, fam, want):
        expr = build_residual(fam, Family.lookup(fam).spec.centers)
        assert required_derivatives(expr) == want == expr.derivative_set

    def test_union(self):
        exprs = [build_residual("Adv", (0.5,)), build_residual("Wave", (0.5,))]
        assert required_derivatives(exprs) == {"u_t", "u_x", "u_tt", "u_xx"}

    def test_time_order(self):
        for fam in Family:
            expr = build_residual(fam, fam.spec.centers)
            assert (expr.time_order == 2) == ("u_tt" in expr.derivative_set)
            assert (expr.time_order == 2) == (fam.spec.abbrev in ("Wave", "KG", "SG"))


class TestEval:
    def test_advection_point(self):
        # u = exp(-t) sin(2 pi x) at (0, 1/4): u_t = -1, u_x = 0
        Z = np.array([[1.0, -1.0, 0.0, 0.0, -4 * np.pi**2]])
        assert eval_residual(build_residual("Adv", (0.5,)).tree, Z)[0] == -1.0

    @pytest.mark.parametrize("fam", ["Adv", "Diff", "Wave"])
    def test_zero_field(self, fam):
        expr = build_residual(fam, Family.lookup(fam).spec.centers)
        np.testing.assert_array_equal(eval_residual(expr.tree, np.zeros((7, 5))), 0.0)

    def test_logistic_vanishes_at_one(self):
        expr = build_residual("Diff-Log", (0.003, 1.0))
        Z = np.array([[1.0, 0.0, 0.0, 0.0, 0.0]])
        assert eval_residual(expr.tree, Z)[0] == 0.0

    def test_division_by_zero(self):
        with pytest.raises(sym.NonFiniteResidual):
            eval_residual(parse("div u u_x"), np.zeros((3, 5)))

    def test_negative_base_fractional_power(self):
        tree = Op("pow", Leaf("u"), Const(0.5))
        with pytest.raises(sym.NonFiniteResidual):
            eval_residual(tree, -np.ones((2, 5)))

    def test_constant_only(self):
        out = eval_residual(Const(2.5), np.zeros((4, 5)))
        np.testing.assert_array_equal(out, np.full(4, 2.5))

    def test_channel_count_checked(self):
        with pytest.raises(ValueError):
            eval_residual(Leaf("u"), np.zeros((4, 3)))

    def test_pure(self):
        Z = np.random.default_rng(1).uniform(-1, 1, (32, 5))
        tree = build_residual("Cons-Sin", (1.0, 0.01)).tree
        a, b = eval_residual(tree, Z), eval_residual(tree, Z)
        assert a.tobytes() == b.tobytes()


params_strategy = st.integers(min_value=0, max_value=2**31 - 1)


@settings(max_examples=40, deadline=None)
@given(fam_id=st.integers(0, 12), seed=params_strategy)
def test_round_trip_property(fam_id, seed):
    from physop.datagen import sample_params

    fam = Family(fam_id)
    expr = build_residual(fam, sample_params(fam, seed))
    assert parse(serialize(expr.tree)) == expr.tree
    assert parse(expr.text) == expr.tree


@settings(max_examples=40, deadline=None)
@given(fam_id=st.integers(0, 12), seed=params_strategy)
def test_oracle_property(fam_id, seed):
    from physop.datagen import sample_params

    fam = Family(fam_id)
    params = sample_params(fam, seed)
    Z = np.random.default_rng(seed).uniform(-1, 1, (32, 5))
    got = eval_residual(build_residual(fam, params).tree, Z)
    ref = closed_form_residual(fam.spec.abbrev, params, Z)
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_sampled_params_in_range():
    from physop.datagen import sample_params

    for fam in Family:
        for seed in range(20):
            p = np.array(sample_params(fam, seed))
            c = np.array(fam.spec.centers)
            assert np.all(p >= 0.9 * c) and np.all(p <= 1.1 * c)
