"""Forward pass for real and discrete-weight networks.

Conv and FC layers lay their per-output terms out as (..., channels, 3, 3)
or (..., inputs) and reduce them with one ``np.add.reduce`` over the last
axis.  Discrete weights build those terms by routing (+a, -a or 0) rather
than multiplying; the naive multiply path builds the same terms, so both
paths reduce identical operands in identical order and agree bit for bit.
"""

from __future__ import annotations

from typing import Union

import numpy as np

from .model import DiscreteModelInstance, LayerKind, NetworkModel

Net = Union[NetworkModel, DiscreteModelInstance]

# caps the size of one terms block (elements) before chunking over the batch
_BLOCK = 1 << 23


def sign_act(x):
    """+1 for x >= 0, -1 otherwise."""
    return np.where(np.asarray(x) >= 0, 1.0, -1.0) if np.ndim(x) else (1.0 if x >= 0 else -1.0)


def relu_act(x):
    return np.maximum(x, 0.0) if np.ndim(x) else max(0.0, float(x))


def ternary_dot(weights, activations) -> float:
    """Sum of +a / -a over nonzero ternary weights, accumulated left to right."""
    if len(weights) != len(activations):
        raise ValueError(f"length mismatch: {len(weights)} weights vs {len(activations)} activations")
    acc = 0.0
    for w, a in zip(weights, activations):
        if w == 1:
            acc += a
        elif w == -1:
            acc -= a
        elif w != 0:
            raise ValueError(f"non-ternary weight {w}")
    return acc


def _routed_terms(w: np.ndarray, a: np.ndarray) -> np.ndarray:
    return np.where(w == 1, a, np.where(w == -1, -a, 0.0))


def _multiplied_terms(w: np.ndarray, a: np.ndarray) -> np.ndarray:
    return w.astype(np.float64) * a


def _dense(x2d: np.ndarray, w: np.ndarray, b: np.ndarray, terms) -> np.ndarray:
    """x2d: (B, D), w: (O, D) -> (B, O)."""
    B, D = x2d.shape
    step = max(1, _BLOCK // max(1, w.shape[0] * D))
    outs = []
    for s in range(0, B, step):
        t = terms(w[None, :, :], x2d[s:s + step, None, :])
        outs.append(np.add.reduce(t, axis=-1))
    return np.concatenate(outs, axis=0) + b


def im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, H*W, C*9) patches with zero padding 1, channel-major."""
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((B, H, W, C, 3, 3), dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            cols[..., dy, dx] = xp[:, :, dy:dy + H, dx:dx + W].transpose(0, 2, 3, 1)
    return cols.reshape(B, H * W, C * 9)


def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray, terms) -> np.ndarray:
    B, C, H, W = x.shape
    O = w.shape[0]
    cols = im2col(x)
    wf = w.reshape(O, C * 9)
    step = max(1, _BLOCK // max(1, O * H * W * C * 9))
    outs = []
    for s in range(0, B, step):
        t = terms(wf[None, None, :, :], cols[s:s + step, :, None, :])
        outs.append(np.add.reduce(t, axis=-1))
    y = np.concatenate(outs, axis=0) + b            # (B, HW, O)
    return y.transpose(0, 2, 1).reshape(B, O, H, W)


def maxpool2(x: np.ndarray) -> np.ndarray:
    B, C, H, W = x.shape
    x = x[:, :, :H - H % 2, :W - W % 2]
    return x.reshape(B, C, H // 2, 2, W // 2, 2).max(axis=(3, 5))


def forward(net: Net, x, multiplierless: bool = True) -> np.ndarray:
    """Class scores for one example (shape ``input_shape``) or a batch.

    Discrete instances use the routed accumulation unless
    ``multiplierless=False``, which multiplies the integer weights instead.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == net.input_shape
    if single:
        x = x[None]
    if x.shape[1:] != net.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match model input {net.input_shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    discrete = isinstance(net, DiscreteModelInstance)
    terms = _routed_terms if (discrete and multiplierless) else _multiplied_terms

    for i, layer in enumerate(net.layers):
        k = layer.kind
        if k is LayerKind.CONV3X3:
            if x.ndim != 4:
                raise ValueError(f"layer {i}: conv3x3 needs a (B, C, H, W) input")
            x = _conv3x3(x, net.weights[i], net.biases[i], terms)
        elif k is LayerKind.FC:
            x = _dense(x.reshape(x.shape[0], -1), net.weights[i], net.biases[i], terms)
        elif k is LayerKind.MAXPOOL2:
            x = maxpool2(x)
        elif k is LayerKind.SIGN:
            x = np.where(x >= 0, 1.0, -1.0)
        elif k is LayerKind.RELU:
            x = np.maximum(x, 0.0)
        elif k is LayerKind.BN_AFFINE:
            shape = (1, -1) + (1,) * (x.ndim - 2)
            x = x * net.scales[i].reshape(shape) + net.biases[i].reshape(shape)
        elif k is LayerKind.SQUARE_HINGE:
            pass
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite scores")
    return x[0] if single else x
