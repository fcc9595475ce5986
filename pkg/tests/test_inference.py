import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bitstorm.inference import forward, im2col, maxpool2, relu_act, sign_act, ternary_dot
from bitstorm.model import DiscreteModelInstance, LayerKind, LayerSpec, NetworkModel


def discrete(layers, input_shape, weights, biases, scales=None):
    scales = scales or [None] * len(layers)
    return DiscreteModelInstance(layers, input_shape, weights, biases, scales, "ternary")


def naive_conv(x, w, b):
    """Loop-based 3x3 convolution with zero padding 1, used as the oracle."""
    C, H, W = x.shape
    O = w.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((O, H, W))
    for o in range(O):
        for i in range(H):
            for j in range(W):
                out[o, i, j] = np.sum(w[o] * xp[:, i:i + 3, j:j + 3]) + b[o]
    return out


class TestActivations:
    @pytest.mark.parametrize("x, expected", [(0.0, 1.0), (-0.0, 1.0), (-1e-9, -1.0), (3.0, 1.0)])
    def test_sign(self, x, expected):
        assert sign_act(x) == expected

    def test_sign_array(self):
        np.testing.assert_array_equal(sign_act(np.array([-2.0, 0.0, 0.5])), [-1, 1, 1])

    def test_relu(self):
        assert relu_act(-3) == 0.0
        np.testing.assert_array_equal(relu_act(np.array([-1.0, 2.0])), [0, 2])


class TestTernaryDot:
    def test_example(self):
        assert ternary_dot([1, 0, -1], [2.0, 5.0, 3.0]) == -1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ternary_dot([1, 0], [1.0, 2.0, 3.0])

    @given(st.lists(st.tuples(st.sampled_from([-1, 0, 1]), st.floats(-100, 100)), max_size=30))
    def test_matches_sum(self, pairs):
        w = [p[0] for p in pairs]
        a = [p[1] for p in pairs]
        assert ternary_dot(w, a) == pytest.approx(sum(x * y for x, y in zip(w, a)), abs=1e-9)


class TestConv:
    def test_single_channel_all_ones(self):
        layers = [LayerSpec(LayerKind.CONV3X3, 1, 1)]
        net = discrete(layers, (1, 3, 3), [np.ones((1, 1, 3, 3), dtype=np.int8)], [np.zeros(1)])
        out = forward(net, np.ones((1, 3, 3)))
        assert out[0, 1, 1] == 9
        assert out[0, 0, 0] == 4
        assert out[0, 0, 1] == 6

    def test_matches_naive(self):
        rng = np.random.default_rng(0)
        w = rng.uniform(-1, 1, (4, 3, 3, 3))
        b = rng.normal(size=4)
        x = rng.normal(size=(3, 5, 6))
        layers = [LayerSpec(LayerKind.CONV3X3, 3, 4)]
        net = NetworkModel(layers, (3, 5, 6), [w], [b], [None])
        np.testing.assert_allclose(forward(net, x), naive_conv(x, w, b), atol=1e-12)

    def test_im2col_layout(self):
        x = np.arange(2 * 2 * 2, dtype=float).reshape(1, 2, 2, 2)
        cols = im2col(x)
        assert cols.shape == (1, 4, 18)
        # top-left output pixel, channel 0, centre tap is x[0, 0, 0, 0]
        assert cols[0, 0, 4] == 0.0
        assert cols[0, 0, 9 + 4] == 4.0

    def test_maxpool(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(maxpool2(x)[0, 0], [[5, 7], [13, 15]])


def random_net(rng, weight_dtype=np.int8):
    layers = [LayerSpec(LayerKind.CONV3X3, 2, 3), LayerSpec(LayerKind.BN_AFFINE, 3, 3),
              LayerSpec(LayerKind.SIGN), LayerSpec(LayerKind.MAXPOOL2),
              LayerSpec(LayerKind.FC, 3 * 2 * 2, 5), LayerSpec(LayerKind.RELU),
              LayerSpec(LayerKind.FC, 5, 3), LayerSpec(LayerKind.SQUARE_HINGE, 3, 3)]
    ws = [rng.integers(-1, 2, (3, 2, 3, 3)), None, None, None, rng.integers(-1, 2, (5, 12)), None,
          rng.integers(-1, 2, (3, 5)), None]
    bs = [rng.normal(size=3), rng.normal(size=3), None, None, rng.normal(size=5), None,
          rng.normal(size=3), None]
    sc = [None, rng.uniform(0.5, 2, 3)] + [None] * 6
    return discrete(layers, (2, 4, 5), [None if w is None else w.astype(weight_dtype) for w in ws], bs, sc)


class TestForward:
    def test_routed_equals_multiplied(self):
        rng = np.random.default_rng(3)
        net = random_net(rng)
        x = rng.normal(size=(7, 2, 4, 5))
        routed = forward(net, x)
        multiplied = forward(net, x, multiplierless=False)
        assert routed.tobytes() == multiplied.tobytes()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1),
           arrays(np.float64, (3, 2, 4, 5), elements=st.floats(-1e3, 1e3)))
    def test_routed_equals_multiplied_property(self, seed, x):
        net = random_net(np.random.default_rng(seed))
        assert forward(net, x).tobytes() == forward(net, x, multiplierless=False).tobytes()

    def test_single_and_batch_agree(self):
        rng = np.random.default_rng(4)
        net = random_net(rng)
        x = rng.normal(size=(3, 2, 4, 5))
        batch = forward(net, x)
        for i in range(3):
            np.testing.assert_array_equal(forward(net, x[i]), batch[i])

    def test_shape_mismatch(self):
        net = random_net(np.random.default_rng(0))
        with pytest.raises(ValueError):
            forward(net, np.zeros((2, 4, 4)))

    def test_non_finite_input(self):
        net = random_net(np.random.default_rng(0))
        x = np.zeros((1, 2, 4, 5))
        x[0, 0, 0, 0] = np.inf
        with pytest.raises(ValueError, match="non-finite"):
            forward(net, x)

    def test_maxpool_example(self):
        assert maxpool2(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))[0, 0, 0, 0] == 4

    def test_identity_fc(self):
        layers = [LayerSpec(LayerKind.FC, 3, 3), LayerSpec(LayerKind.SQUARE_HINGE, 3, 3)]
        net = discrete(layers, (3,), [np.eye(3, dtype=np.int8), None], [np.zeros(3), None])
        np.testing.assert_array_equal(forward(net, [0.5, -2.0, 7.0]), [0.5, -2.0, 7.0])

    def test_fc_reference(self):
        w = np.array([[1, 0, -1], [0, 1, 1]], dtype=np.int8)
        layers = [LayerSpec(LayerKind.FC, 3, 2), LayerSpec(LayerKind.SQUARE_HINGE, 2, 2)]
        net = discrete(layers, (3,), [w, None], [np.array([0.5, -0.5]), None])
        np.testing.assert_array_equal(forward(net, [1.0, 2.0, 3.0]), [-1.5, 4.5])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_hidden_preactivations_are_integers(seed):
    rng = np.random.default_rng(seed)
    layers = [LayerSpec(LayerKind.FC, 4, 6), LayerSpec(LayerKind.SIGN), LayerSpec(LayerKind.FC, 6, 5),
              LayerSpec(LayerKind.SIGN), LayerSpec(LayerKind.FC, 5, 3), LayerSpec(LayerKind.SQUARE_HINGE, 3, 3)]
    ws = [rng.integers(-1, 2, (6, 4)).astype(np.int8), None, rng.integers(-1, 2, (5, 6)).astype(np.int8), None,
          rng.integers(-1, 2, (3, 5)).astype(np.int8), None]
    bs = [np.zeros(6), None, np.zeros(5), None, np.zeros(3), None]
    net = discrete(layers, (4,), ws, bs)
    scores = forward(net, rng.normal(size=(8, 4)))
    np.testing.assert_array_equal(scores, np.round(scores))
