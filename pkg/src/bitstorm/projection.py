"""Stochastic projection of shadow weights onto ternary or binary alphabets."""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .model import DiscreteModelInstance, NetworkModel, ProjectionMode, clip

_MASK64 = (1 << 64) - 1


class RandomSource:
    """Deterministic random stream keyed by ``(seed, stream_id)``.

    Child streams come from ``derive``; the child id is a hash of the parent
    id and the keys, so streams can be pre-split per (trial, member, layer)
    and consumed in any scheduling order.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        ss = np.random.SeedSequence([self.seed, self.stream_id])
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def __repr__(self):
        return f"RandomSource(seed={self.seed}, stream_id={self.stream_id:#x})"

    def derive(self, *keys) -> "RandomSource":
        h = hashlib.blake2b(repr((self.stream_id, keys)).encode(), digest_size=8)
        return RandomSource(self.seed, int.from_bytes(h.digest(), "little"))

    def uniform(self, size=None):
        """Uniform reals in [0, 1)."""
        return self._gen.random(size)

    def bit(self) -> int:
        return int(self._gen.integers(0, 2))

    def bits(self, n: int) -> np.ndarray:
        return self._gen.integers(0, 2, size=n, dtype=np.uint8)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def sround(w, rng: RandomSource):
    """Round to a neighbouring integer, up with probability ``w - floor(w)``.

    A scalar integer input is returned unchanged without touching ``rng``.
    Array inputs consume one uniform draw per element in row-major order.
    """
    a = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("sround: non-finite input")
    if a.ndim == 0:
        x = float(a)
        lo = math.floor(x)
        p = x - lo
        if p == 0.0:
            return int(lo)
        return lo + 1 if rng.uniform() < p else lo
    lo = np.floor(a)
    return (lo + (rng.uniform(a.shape) < (a - lo))).astype(np.int64)


def _ternary(w: np.ndarray, u: np.ndarray) -> np.ndarray:
    lo = np.floor(w)
    return (lo + (u < (w - lo))).astype(np.int8)


def _binary(w: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.where(u < (w + 1.0) / 2.0, 1, -1).astype(np.int8)


def _project(model: NetworkModel, rng: RandomSource, mode: ProjectionMode) -> DiscreteModelInstance:
    fn = _ternary if mode is ProjectionMode.TERNARY else _binary
    out = []
    for i, w in enumerate(model.weights):
        if w is None:
            out.append(None)
            continue
        u = rng.derive("layer", i).uniform(w.shape)
        out.append(fn(clip(w), u))
    return DiscreteModelInstance(model.layers, model.input_shape, out, model.biases,
                                 model.scales, mode)


def project_ternary(model: NetworkModel, rng: RandomSource) -> DiscreteModelInstance:
    """Independently stochastic-round every shadow weight onto {-1, 0, +1}."""
    return _project(model, rng, ProjectionMode.TERNARY)


def project_binary(model: NetworkModel, rng: RandomSource) -> DiscreteModelInstance:
    """Map every shadow weight to +1 with probability (w + 1) / 2, else -1."""
    return _project(model, rng, ProjectionMode.BINARY)


def project(model: NetworkModel, mode, rng: RandomSource) -> DiscreteModelInstance:
    return _project(model, rng, ProjectionMode(mode))


def project_weights(w: np.ndarray, mode, rng: RandomSource) -> np.ndarray:
    """Project a single weight tensor (used by the training loop)."""
    mode = ProjectionMode(mode)
    fn = _ternary if mode is ProjectionMode.TERNARY else _binary
    return fn(clip(w), rng.uniform(np.shape(w)))


def expected_projection(w: float, mode) -> float:
    ProjectionMode(mode)
    return clip(w)
