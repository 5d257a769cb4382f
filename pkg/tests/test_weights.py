import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nnstokes.grid import MacGrid, rough_forcing_dirac
from nnstokes.weights import (CubeFamily, GridField, Weight, a1_constant, ap_constant,
                              cap_weight, default_s0, dual_weight, embedding_constant,
                              embedding_exponent, embedding_ratio, face_weights,
                              maximal_function, min_weight, node_weights, weight_from_forcing,
                              weighted_lp_norm)

fields2d = arrays(np.float64, st.tuples(st.integers(2, 9), st.integers(2, 9)),
                  elements=st.floats(-50, 50, allow_nan=False))
# squares of these stay representable
moderate2d = arrays(np.float64, st.tuples(st.integers(2, 9), st.integers(2, 9)),
                    elements=st.one_of(st.just(0.0), st.floats(1e-100, 50), st.floats(-50, -1e-100)))


def interval_indicator(h=1 / 256):
    x = -2.0 + (np.arange(int(round(5 / h))) + 0.5) * h
    return GridField(((x >= 0) & (x <= 1)).astype(float), h, (-2.0,))


def sqrt_abs_weight(h):
    x = -1.0 + (np.arange(int(round(2 / h))) + 0.5) * h
    return Weight(GridField(np.sqrt(np.abs(x)), h, (-1.0,)))


class TestGridField:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            GridField(np.array([1.0, np.nan]), 0.5)

    def test_rejects_bad_spacing(self):
        with pytest.raises(ValueError):
            GridField(np.ones(3), 0.0)

    def test_binary_roundtrip(self, tmp_path):
        f = GridField(np.random.default_rng(0).normal(size=(5, 7)), 0.125, (0.25, -1.0))
        g = GridField.load(f.save(tmp_path / "f.nnsf"))
        assert np.array_equal(f.values, g.values)
        assert (g.h, g.origin) == (f.h, f.origin)
        assert f.to_bytes()[:4] == b"NNSF"

    def test_binary_rejects_garbage(self):
        with pytest.raises(ValueError):
            GridField.from_bytes(b"XXXX" + bytes(40))

    def test_csv(self, tmp_path):
        f = GridField(np.arange(6.0).reshape(2, 3), 0.5)
        table = np.loadtxt(f.to_csv(tmp_path / "f.csv"), delimiter=",", skiprows=1)
        assert table.shape == (6, 5)
        np.testing.assert_array_equal(table[:, -1], np.arange(6.0))

    def test_index_of(self):
        f = interval_indicator()
        i = f.index_of((2.0,))[0]
        assert f.centers(0)[i] == pytest.approx(2.0 + 0.5 / 256)


class TestMaximalFunction:
    def test_interval_closed_form(self):
        f = interval_indicator()
        Mf = maximal_function(f)
        i = f.index_of((2.0,))[0]
        assert abs(Mf.values[i] - 0.25) <= 3 * f.h
        # frozen oracle value at the cell containing x = 2
        assert Mf.values[i] == pytest.approx(0.249756, abs=1e-6)

    def test_zero(self):
        assert np.all(maximal_function(GridField(np.zeros((6, 6)), 0.1)).values == 0)

    def test_constant_center(self):
        Mf = maximal_function(GridField(np.ones((9, 9)), 0.1))
        assert np.all(Mf.values >= 1.0)
        assert Mf.values[4, 4] == 1.0

    @settings(max_examples=50)
    @given(fields2d)
    def test_dominates_pointwise(self, a):
        f = GridField(a, 0.1)
        assert np.all(maximal_function(f).values >= np.abs(a))

    @settings(max_examples=50)
    @given(fields2d, st.integers(0, 2 ** 31))
    def test_sublinear(self, a, seed):
        b = np.random.default_rng(seed).normal(size=a.shape) * 10
        f, g = GridField(a, 0.1), GridField(b, 0.1)
        lhs = maximal_function(GridField(a + b, 0.1)).values
        rhs = maximal_function(f).values + maximal_function(g).values
        assert np.all(lhs <= rhs + 1e-12 * (1 + rhs))


class TestApConstant:
    @pytest.mark.parametrize("p", [1.5, 2.0, 4.0])
    def test_constant_weight(self, p):
        assert ap_constant(Weight.constant((16, 16), 1 / 16, 3.0), p) == pytest.approx(1.0, abs=1e-12)

    def test_rejects_p_one(self):
        with pytest.raises(ValueError):
            ap_constant(Weight.constant((4,), 0.25), 1.0)

    def test_sqrt_abs_oracle(self):
        # dyadic-family supremum, identical at h = 2^-8 and 2^-10
        for h in (2.0 ** -8, 2.0 ** -10):
            assert ap_constant(sqrt_abs_weight(h), 2.0) == pytest.approx(1.3610554111081, rel=1e-10)

    @settings(max_examples=30)
    @given(arrays(np.float64, st.integers(2, 40), elements=st.floats(1e-3, 1e3)))
    def test_at_least_one(self, a):
        assert ap_constant(Weight(GridField(a, 0.1)), 2.0) >= 1.0

    def test_minimum_of_weights(self):
        w1 = sqrt_abs_weight(1 / 128)
        x = w1.field.centers(0)
        w2 = Weight(w1.field.like(np.abs(x - 0.3) ** 0.4 + 1e-12))
        assert ap_constant(min_weight(w1, w2), 2.0) <= ap_constant(w1, 2.0) + ap_constant(w2, 2.0)

    def test_certify_cache(self):
        w = sqrt_abs_weight(1 / 64)
        v = w.certify(2.0)
        assert (2.0, CubeFamily(w.field.shape).family_id) in w.cache
        assert w.certify(2.0) == v

    def test_interior_family_smaller(self):
        w = sqrt_abs_weight(1 / 64)
        fam = CubeFamily(w.field.shape, "interior")
        assert len(fam) < len(CubeFamily(w.field.shape))
        assert ap_constant(w, 2.0, fam) <= ap_constant(w, 2.0) + 1e-12

    def test_family_modes(self):
        with pytest.raises(ValueError):
            CubeFamily((8,), "extended")


class TestA1:
    def test_constant(self):
        assert a1_constant(Weight.constant((8, 8), 0.125)) == pytest.approx(1.0)

    def test_ramp(self):
        w = Weight(GridField(np.linspace(1, 2, 50), 0.02))
        assert a1_constant(w) > 1.0

    def test_root_of_maximal_function_stable(self):
        vals = []
        for h in (1 / 128, 1 / 256, 1 / 512):
            g = interval_indicator(h)
            w = Weight(g.like(np.sqrt(maximal_function(g).values) + 0.0))
            vals.append(a1_constant(w))
        assert max(vals) / min(vals) < 1.2


class TestWeightConstructions:
    def test_zero_forcing(self):
        w = weight_from_forcing(GridField(np.zeros((8, 8)), 0.125), 1.5)
        assert np.all(w.values == 1.0)

    def test_peak_value(self):
        a = np.zeros((33, 33))
        a[16, 16] = 1e3
        w = weight_from_forcing(GridField(a, 1 / 33), 1.5)
        assert w.values.min() == pytest.approx((1 + 1e3) ** -0.5, rel=1e-12)
        assert w.values.min() == pytest.approx(0.0316, abs=1e-4)

    def test_rejects_s0(self):
        with pytest.raises(ValueError):
            weight_from_forcing(GridField(np.zeros(4), 0.25), 2.0)

    @settings(max_examples=40)
    @given(fields2d, st.floats(1.05, 1.95))
    def test_weighted_chain(self, a, s0):
        f = GridField(a, 0.1)
        w = weight_from_forcing(f, s0, certify=False)
        lhs = np.sum(a ** 2 * w.values)
        rhs = np.sum((1 + np.abs(a)) ** s0)
        assert lhs <= rhs * (1 + 1e-12)
        assert np.all((w.values > 0) & (w.values <= 1))

    def test_dirac_weight_stable(self):
        vals = []
        for n in (64, 128, 256):
            f = rough_forcing_dirac(MacGrid(n))
            vals.append(weight_from_forcing(f, 1.5, certify=False).certify(2.0))
        assert max(vals) / min(vals) - 1 <= 0.2

    def test_dual(self):
        w = sqrt_abs_weight(1 / 32)
        np.testing.assert_allclose(dual_weight(w, 2.0).values, 1 / w.values, rtol=1e-15)
        np.testing.assert_allclose(dual_weight(dual_weight(w, 3.0), 1.5).values, w.values,
                                   rtol=1e-13)
        assert np.all(dual_weight(Weight.constant((4,), 0.25), 4.0).values == 1)

    def test_cap_weight(self):
        w = Weight(GridField(np.linspace(0.05, 1, 20), 0.05))
        assert np.array_equal(cap_weight(w, 1).values, w.values)
        assert np.all(cap_weight(w, 20).values == 1)
        caps = [cap_weight(w, j).values for j in (1, 2, 5, 10)]
        assert all(np.all(b >= a) for a, b in zip(caps, caps[1:]))
        with pytest.raises(ValueError):
            cap_weight(w, 0)

    def test_cap_weight_certificate(self):
        w = weight_from_forcing(rough_forcing_dirac(MacGrid(64), amplitude=50.0), 1.5)
        a0 = w.certify(2.0)
        for j in (1, 3, 10):
            assert ap_constant(cap_weight(w, j), 2.0) <= max(1.0, a0) + 1e-12

    def test_default_s0(self):
        assert default_s0(2.0) == 1.5
        assert 1 < default_s0(10.0) < 2 and 1 < default_s0(1.01) < 2


class TestNorms:
    def test_unit_square(self):
        f = GridField(np.ones((32, 32)), 1 / 32)
        for p in (1.0, 2.0, 3.5):
            assert weighted_lp_norm(f, None, p) == pytest.approx(1.0, abs=2 / 32)

    def test_constant_weight_is_plain(self):
        a = np.random.default_rng(0).normal(size=(8, 8))
        f = GridField(a, 0.125)
        w = Weight.constant((8, 8), 0.125)
        assert weighted_lp_norm(f, w, 2.0) == pytest.approx(np.sqrt(np.sum(a ** 2)) * 0.125)

    def test_rejects_p_below_one(self):
        with pytest.raises(ValueError):
            weighted_lp_norm(GridField(np.ones(3), 1.0), None, 0.5)

    @settings(max_examples=40)
    @given(moderate2d, st.integers(0, 2 ** 31))
    def test_hoelder(self, a, seed):
        rng = np.random.default_rng(seed)
        b = rng.normal(size=a.shape)
        w = Weight(GridField(np.exp(rng.normal(size=a.shape)), 0.1))
        f, g = GridField(a, 0.1), GridField(b, 0.1)
        lhs = np.sum(np.abs(a * b)) * 0.01
        rhs = weighted_lp_norm(f, w, 2.0) * weighted_lp_norm(g, dual_weight(w, 2.0), 2.0)
        assert lhs <= rhs * (1 + 1e-12)

    def test_face_and_node_weights(self):
        w = np.arange(1.0, 7.0).reshape(2, 3)
        fx = face_weights(w, 0)
        assert fx.shape == (3, 3)
        np.testing.assert_array_equal(fx[1], 0.5 * (w[0] + w[1]))
        np.testing.assert_array_equal(fx[0], w[0])
        nw = node_weights(w)
        assert nw.shape == (3, 4)
        assert nw[0, 0] == w[0, 0] and nw[1, 1] == pytest.approx(w[:, :2].mean())


class TestEmbedding:
    def test_exponent_range(self):
        for a in (1.0, 2.0, 50.0):
            s = embedding_exponent(a, 2.0)
            assert 1 < s < 2

    def test_inequality_on_random_fields(self):
        w = weight_from_forcing(rough_forcing_dirac(MacGrid(32), amplitude=20.0), 1.5)
        a2 = w.certify(2.0)
        s = embedding_exponent(a2, 2.0)
        C = embedding_constant(w, 2.0, s)
        rng = np.random.default_rng(3)
        for _ in range(5):
            f = GridField(rng.standard_cauchy(size=w.values.shape), w.field.h)
            assert embedding_ratio(f, w, 2.0, s) <= C * (1 + 1e-12)

    def test_constant_weight(self):
        w = Weight.constant((16, 16), 1 / 16)
        assert embedding_constant(w, 2.0, 1.5) == pytest.approx(1.0)
