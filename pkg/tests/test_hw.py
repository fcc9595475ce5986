import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bitstorm.hw import (
    DaalenModulator,
    IdealSelectStream,
    Lfsr,
    LfsrSelectStream,
    MuxRounderConfig,
    SelectSource,
    SingleLfsrSelectStream,
    daalen_bit,
    exact_output_probability,
    fermat_product,
    hw_project_model,
    hw_project_ternary,
    joint_select_distribution,
    lfsr_period,
    lfsr_step,
    make_select_stream,
    modulate,
    modulator_targets,
    mux_out,
    route,
    select_bit_probabilities,
    select_distribution,
    select_perturbation,
)
from bitstorm.model import (
    LayerKind,
    LayerSpec,
    NetworkModel,
    QFraction,
    SignMagnitudeWeight,
    encode_sign_magnitude,
)
from bitstorm.projection import RandomSource


def brute_lfsr_bits(state, width, taps, count):
    """Independent reference: explicit bit list, shift right, feedback at the top."""
    reg = [(state >> i) & 1 for i in range(width)]
    out = []
    for _ in range(count):
        out.append(reg[0])
        fb = 0
        for t in taps:
            fb ^= reg[width - t]
        reg = reg[1:] + [fb]
    return out


class TestMux:
    def test_routes_selected_bit(self):
        assert mux_out(0b0100, 3) == 1
        assert mux_out(0b0100, 2) == 0

    def test_select_out_of_range(self):
        with pytest.raises(ValueError):
            mux_out(1, 5, 4)
        with pytest.raises(ValueError):
            mux_out(1, 0)

    def test_select_distribution_n4(self):
        assert select_distribution(4) == [Fraction(1, 15), Fraction(2, 15), Fraction(4, 15), Fraction(8, 15)]
        assert sum(select_distribution(16)) == 1

    def test_nine_sixteenths(self):
        assert exact_output_probability(QFraction(9, 4)) == Fraction(3, 5)

    @pytest.mark.parametrize("n", [2, 4, 8])
    def test_exact_law_exhaustive(self, n):
        for b in range(1 << n):
            p = exact_output_probability(QFraction(b, n))
            assert p == Fraction(b, 1 << n) * Fraction(1 << n, (1 << n) - 1)
            assert abs(p - Fraction(b, 1 << n)) <= Fraction(1, 1 << n)

    @pytest.mark.parametrize("n", [3, 6, 0, 64])
    def test_bad_width(self, n):
        with pytest.raises(ValueError):
            select_distribution(n)


class TestSelectFactorization:
    @pytest.mark.parametrize("m, expected", [(2, 3), (4, 15), (8, 255), (16, 65535)])
    def test_fermat_product(self, m, expected):
        assert fermat_product(m) == expected

    def test_bit_probabilities_n8(self):
        assert [s.p_one for s in select_bit_probabilities(8)] == [Fraction(2, 3), Fraction(4, 5),
                                                                 Fraction(16, 17)]

    @pytest.mark.parametrize("n", [2, 4, 8, 16])
    def test_joint_equals_ideal(self, n):
        joint = joint_select_distribution([s.p_one for s in select_bit_probabilities(n)])
        assert joint == select_distribution(n)

    def test_modulator_targets(self):
        assert [t.bits for t in modulator_targets(8, 16)] == [43691, 52429, 61681]

    def test_perturbation_shrinks_with_width(self):
        assert select_perturbation(8, 16) < select_perturbation(8, 8) <= Fraction(1, 2 ** 6)


class TestModulator:
    def test_truth_table_m2(self):
        # target 0b01 -> 1/4: LSB ORs r0 into 0, then bit1=0 ANDs with r1
        mod = DaalenModulator(QFraction(1, 2))
        ones = [daalen_bit(mod, bits) for bits in itertools.product((0, 1), repeat=2)]
        assert sum(ones) == 1

    @pytest.mark.parametrize("m", range(1, 11))
    def test_exhaustive_exactness(self, m):
        patterns = np.array(list(itertools.product((0, 1), repeat=m)), dtype=np.uint8)
        targets = np.arange(1 << m, dtype=np.uint64)
        out = modulate(targets[:, None], m, patterns[None, :, :])
        np.testing.assert_array_equal(out.sum(axis=1), targets)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(0)
        bits = rng.integers(0, 2, (50, 6))
        for t in (0, 5, 37, 63):
            mod = DaalenModulator(QFraction(t, 6))
            ref = [daalen_bit(mod, row) for row in bits]
            np.testing.assert_array_equal(modulate(t, 6, bits), ref)

    def test_wrong_bit_count(self):
        with pytest.raises(ValueError):
            daalen_bit(DaalenModulator(QFraction(1, 4)), [0, 1])


class TestLfsr:
    def test_matches_reference(self):
        lf = Lfsr(0xACE1)
        assert [lf.step() for _ in range(200)] == brute_lfsr_bits(0xACE1, 16, (16, 14, 13, 11), 200)

    def test_take_matches_step(self):
        a, b = Lfsr(123), Lfsr(123)
        chunk = a.take(70000)
        np.testing.assert_array_equal(chunk, [b.step() for _ in range(70000)])
        assert a.state == b.state

    def test_peek_does_not_advance(self):
        lf = Lfsr(99)
        first = lf.peek(20)
        np.testing.assert_array_equal(lf.take(20), first)

    def test_register_bits_are_future_outputs(self):
        lf = Lfsr(0xBEEF)
        future = lf.peek(16)
        assert [(lf.state >> i) & 1 for i in range(16)] == list(future)

    def test_default_period(self):
        assert lfsr_period(Lfsr(1)) == (65535, 32768)

    def test_small_period(self):
        assert lfsr_period(Lfsr(1, width=4, taps=(4, 3))) == (15, 8)

    def test_zero_state_rejected(self):
        with pytest.raises(ValueError):
            Lfsr(0)

    def test_step_helper(self):
        lf = Lfsr(1)
        bit, state = lfsr_step(lf)
        assert bit == 1 and state == lf.state

    def test_taps_validated(self):
        with pytest.raises(ValueError):
            Lfsr(1, width=16, taps=(15, 3))


def empirical_dist(sel, n):
    return np.bincount(sel, minlength=n + 1)[1:] / len(sel)


class TestSelectStreams:
    @pytest.mark.parametrize("source", list(SelectSource))
    def test_distribution(self, source):
        cfg = MuxRounderConfig(n_inputs=4, select_source=source)
        sel = make_select_stream(cfg, RandomSource(1)).draw(60000)
        assert sel.min() >= 1 and sel.max() <= 4
        ideal = np.array([float(p) for p in select_distribution(4)])
        tol = 4 * np.sqrt(ideal * (1 - ideal) / len(sel)) + float(select_perturbation(4, 16))
        assert np.all(np.abs(empirical_dist(sel, 4) - ideal) <= tol)

    def test_next(self):
        s = IdealSelectStream(8, RandomSource(0))
        assert 1 <= next(s) <= 8

    def test_lfsr_count_checked(self):
        with pytest.raises(ValueError):
            LfsrSelectStream(8, 16, [Lfsr(1)])

    def test_single_lfsr_delays_distinct(self):
        with pytest.raises(ValueError):
            SingleLfsrSelectStream(8, 16, Lfsr(1), delays=(0, 0, 3))

    def test_single_lfsr_uses_delayed_copies(self):
        s = SingleLfsrSelectStream(4, 4, Lfsr(77), delays=(0, 5))
        base = Lfsr(77).take(64 + 5)
        bits = s.select_bits(16)
        targets = modulator_targets(4, 4)
        for col, d in enumerate((0, 5)):
            ref = modulate(targets[col].bits, 4, base[d:d + 64].reshape(16, 4))
            np.testing.assert_array_equal(bits[:, col], ref)


class TestWeightProjection:
    def test_scalar(self):
        w = SignMagnitudeWeight(-1, QFraction(0b0110, 4))
        assert hw_project_ternary(w, 2) == -1
        assert hw_project_ternary(w, 1) == 0

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            hw_project_ternary(SignMagnitudeWeight(1, QFraction(1, 4)), 1, n=8)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(-255, 255), st.integers(1, 8))
    def test_route_matches_scalar(self, signed, sel):
        sign = -1 if signed < 0 else 1
        w = SignMagnitudeWeight(sign, QFraction(abs(signed), 8))
        got = route(np.array([sign]), np.array([abs(signed)], dtype=np.uint64), np.array([sel]))
        assert got[0] == hw_project_ternary(w, sel)


def fc_model(w):
    out, inp = w.shape
    layers = [LayerSpec(LayerKind.FC, inp, out), LayerSpec(LayerKind.SQUARE_HINGE, out, out)]
    return NetworkModel(layers, (inp,), [w, None], [np.zeros(out), None], [None, None])


class TestModelProjection:
    def test_alphabet_and_sign(self):
        w = np.random.default_rng(0).uniform(-1, 1, (6, 10))
        inst = hw_project_model(fc_model(w), MuxRounderConfig(), RandomSource(2), lanes=3)
        t = inst.weights[0]
        assert set(np.unique(t)) <= {-1, 0, 1}
        assert np.all(t * np.sign(w) >= 0)
        assert inst.provenance["lanes"] == 3

    def test_zero_and_saturated(self):
        w = np.concatenate([np.zeros((2, 5)), np.ones((2, 5))])
        inst = hw_project_model(fc_model(w), MuxRounderConfig(), RandomSource(0))
        assert not inst.weights[0][:2].any()
        assert (inst.weights[0][2:] == 1).all()

    def test_shared_broadcast(self):
        # same magnitude in every lane: a broadcast select gives identical rows
        w = np.full((4, 50), 0.5)
        cfg = MuxRounderConfig(select_source=SelectSource.SHARED_SINGLE_PRBS)
        t = hw_project_model(fc_model(w), cfg, RandomSource(5), lanes=4).weights[0]
        assert all(np.array_equal(t[0], t[i]) for i in range(1, 4))

    def test_independent_lanes_differ(self):
        w = np.full((4, 50), 0.5)
        cfg = MuxRounderConfig(select_source=SelectSource.INDEPENDENT_LFSR)
        t = hw_project_model(fc_model(w), cfg, RandomSource(5), lanes=4).weights[0]
        assert not np.array_equal(t[0], t[1])

    def test_deterministic(self):
        w = np.random.default_rng(1).uniform(-1, 1, (5, 7))
        cfg = MuxRounderConfig(select_source=SelectSource.SINGLE_LFSR_MODULATORS)
        a = hw_project_model(fc_model(w), cfg, RandomSource(9), lanes=2)
        b = hw_project_model(fc_model(w), cfg, RandomSource(9), lanes=2)
        assert a.same_weights(b)

    def test_mean_tracks_quantized_weight(self):
        n = 40000
        w = np.full((1, n), 9 / 16 + 0.001)
        t = hw_project_model(fc_model(w), MuxRounderConfig(n_inputs=4), RandomSource(3)).weights[0]
        _, bits = encode_sign_magnitude(w, 4)
        p = float(exact_output_probability(QFraction(int(bits[0, 0]), 4)))
        assert abs(t.mean() - p) <= 4 * np.sqrt(p * (1 - p) / n)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MuxRounderConfig(n_inputs=6)
        with pytest.raises(ValueError):
            hw_project_model(fc_model(np.zeros((1, 1))), MuxRounderConfig(), RandomSource(0), lanes=0)
