"""Bit-exact model of a multiplexer-based stochastic rounding engine.

An N-to-1 multiplexer routes bit ``in_sel`` of an N-bit magnitude word to
its output.  When ``sel`` follows the geometric law
``P(sel=i) = 2**(i-1) / (2**N - 1)`` the output is 1 with probability
``value * 2**N / (2**N - 1)``.  The select index is assembled from log2(N)
independent select bits, each produced either ideally or by an LFSR feeding
a modulator chain.

Select-index convention: ``sel = 1 + sum_j sel_j * 2**(j-1)``.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .model import (
    DiscreteModelInstance,
    NetworkModel,
    ProjectionMode,
    QFraction,
    SignMagnitudeWeight,
    encode_sign_magnitude,
)
from .projection import RandomSource

MUX_WIDTHS = (2, 4, 8, 16, 32)
DEFAULT_TAPS = (16, 14, 13, 11)


class SelectSource(str, enum.Enum):
    IDEAL_EXACT = "ideal"
    INDEPENDENT_LFSR = "lfsr-per-bit"
    SHARED_SINGLE_PRBS = "shared-prbs"
    SINGLE_LFSR_MODULATORS = "single-lfsr"

    @property
    def shared(self) -> bool:
        return self in (SelectSource.SHARED_SINGLE_PRBS, SelectSource.SINGLE_LFSR_MODULATORS)


def _check_n(n: int) -> int:
    if n not in MUX_WIDTHS:
        raise ValueError(f"multiplexer width must be one of {MUX_WIDTHS}, got {n}")
    return n


@dataclass(frozen=True)
class MuxRounderConfig:
    n_inputs: int = 8
    select_source: SelectSource = SelectSource.IDEAL_EXACT
    modulator_width: int = 16
    lfsr_width: int = 16
    lfsr_taps: tuple[int, ...] = DEFAULT_TAPS

    def __post_init__(self):
        _check_n(self.n_inputs)
        object.__setattr__(self, "select_source", SelectSource(self.select_source))
        object.__setattr__(self, "lfsr_taps", tuple(int(t) for t in self.lfsr_taps))
        if self.modulator_width < 2:
            raise ValueError("modulator width must be >= 2")
        _check_taps(self.lfsr_width, self.lfsr_taps)

    @property
    def select_bits(self) -> int:
        return self.n_inputs.bit_length() - 1

    def to_dict(self) -> dict:
        return {"n_inputs": self.n_inputs, "select_source": self.select_source.value,
                "modulator_width": self.modulator_width, "lfsr_width": self.lfsr_width,
                "lfsr_taps": list(self.lfsr_taps)}


# ---------------------------------------------------------------------------
# exact probability model


def mux_out(in_bits: int, sel: int, n: Optional[int] = None) -> int:
    """Route ``in_sel`` (1-based, ``in_1`` is the LSB) to the output."""
    if n is not None and not 1 <= sel <= n:
        raise ValueError(f"select index {sel} outside 1..{n}")
    if sel < 1:
        raise ValueError(f"select index {sel} must be >= 1")
    return (int(in_bits) >> (sel - 1)) & 1


def select_distribution(n: int) -> list[Fraction]:
    _check_n(n)
    den = (1 << n) - 1
    return [Fraction(1 << (i - 1), den) for i in range(1, n + 1)]


def exact_output_probability(word: QFraction) -> Fraction:
    """P(out=1) for a multiplexer of width ``word.width`` driven by ideal selects.

    Computed by summing the routed input bit over every select outcome.
    """
    n = _check_n(word.width)
    return sum((Fraction(word.bit(i)) * p for i, p in enumerate(select_distribution(n), 1)),
               Fraction(0))


@dataclass(frozen=True)
class SelectBitSpec:
    j: int
    num: int
    den: int

    @property
    def p_one(self) -> Fraction:
        return Fraction(self.num, self.den)


def select_bit_probabilities(n: int) -> list[SelectBitSpec]:
    """P(sel_j = 1) = 2**(2**(j-1)) / (2**(2**(j-1)) + 1) for j = 1..log2(n)."""
    _check_n(n)
    specs = []
    for j in range(1, n.bit_length()):
        a = 1 << (1 << (j - 1))
        specs.append(SelectBitSpec(j, a, a + 1))
    return specs


def joint_select_distribution(p_ones: Sequence[Fraction]) -> list[Fraction]:
    """Distribution of ``sel`` when bit j is independently 1 with ``p_ones[j-1]``."""
    dist = []
    for idx in range(1 << len(p_ones)):
        p = Fraction(1)
        for j, q in enumerate(p_ones):
            p *= q if (idx >> j) & 1 else 1 - q
        dist.append(p)
    return dist


def fermat_product(m: int) -> int:
    """prod_{k=1}^{log2 m} (2**(2**(k-1)) + 1)."""
    _check_n(m)
    return math.prod((1 << (1 << (k - 1))) + 1 for k in range(1, m.bit_length()))


def modulator_targets(n: int, m: int) -> list[QFraction]:
    """M-bit round-to-nearest encodings of the select-bit probabilities."""
    out = []
    for spec in select_bit_probabilities(n):
        bits = min(round(spec.p_one * (1 << m)), (1 << m) - 1)
        out.append(QFraction(bits, m))
    return out


def modulated_select_distribution(n: int, m: int) -> list[Fraction]:
    """Select distribution induced by the quantized modulator targets."""
    return joint_select_distribution([t.fraction for t in modulator_targets(n, m)])


def select_perturbation(n: int, m: int) -> Fraction:
    """Largest absolute deviation of the quantized select law from the ideal one."""
    return max(abs(a - b) for a, b in
               zip(modulated_select_distribution(n, m), select_distribution(n)))


# ---------------------------------------------------------------------------
# LFSR


def _check_taps(width: int, taps: Sequence[int]):
    if width < 2:
        raise ValueError("LFSR width must be >= 2")
    if not taps or any(not 1 <= t <= width for t in taps) or len(set(taps)) != len(taps):
        raise ValueError(f"invalid taps {tuple(taps)} for width {width}")
    if width not in taps:
        raise ValueError("taps must include the register width (otherwise the map is not invertible)")


class Lfsr:
    """Fibonacci LFSR shifting right; the feedback enters at the MSB.

    Tap ``t`` reads state bit ``width - t``; the output of a step is the bit
    shifted out of position 0.  Consequently state bit ``i`` is the output
    ``i`` steps ahead, which ``take`` exploits to serve long runs from a
    cached period for maximal-length configurations.
    """

    def __init__(self, state: int = 1, width: int = 16, taps: Sequence[int] = DEFAULT_TAPS):
        _check_taps(width, taps)
        if not 0 < state < (1 << width):
            raise ValueError("LFSR state must be nonzero and fit the register width")
        self.width = width
        self.taps = tuple(taps)
        self.state = int(state)
        self._shifts = tuple(width - t for t in self.taps)
        self._cache = _period_table(width, self.taps) if width <= 24 else None

    def step(self) -> int:
        s = self.state
        fb = 0
        for sh in self._shifts:
            fb ^= (s >> sh) & 1
        self.state = (s >> 1) | (fb << (self.width - 1))
        return s & 1

    def take(self, n: int) -> np.ndarray:
        """The next ``n`` output bits as uint8; advances the state by ``n`` steps."""
        if self._cache is None:
            return np.fromiter((self.step() for _ in range(n)), dtype=np.uint8, count=n)
        seq, offset_of = self._cache
        period = len(seq)
        t = int(offset_of[self.state])
        out = seq[(t + np.arange(n)) % period]
        self.state = _state_at(seq, (t + n) % period, self.width)
        return out

    def peek(self, n: int) -> np.ndarray:
        """The next ``n`` output bits without advancing."""
        saved = self.state
        out = self.take(n)
        self.state = saved
        return out


def _state_at(seq: np.ndarray, t: int, width: int) -> int:
    period = len(seq)
    idx = (t + np.arange(width)) % period
    return int(np.dot(seq[idx].astype(np.int64), 1 << np.arange(width, dtype=np.int64)))


@functools.lru_cache(maxsize=16)
def _period_table(width: int, taps: tuple[int, ...]):
    """(period sequence, state->offset) for maximal configurations, else None."""
    lf = Lfsr.__new__(Lfsr)
    lf.width, lf.taps, lf.state = width, taps, 1
    lf._shifts = tuple(width - t for t in taps)
    full = (1 << width) - 1
    seq = np.empty(full, dtype=np.uint8)
    for k in range(full):
        seq[k] = lf.step()
        if lf.state == 1 and k < full - 1:
            return None
    if lf.state != 1:
        return None
    states = np.zeros(full, dtype=np.int64)
    for i in range(width):
        states |= np.roll(seq, -i).astype(np.int64) << i
    offset_of = np.zeros(1 << width, dtype=np.int64)
    offset_of[states] = np.arange(full)
    seq.setflags(write=False)
    return seq, offset_of


def lfsr_step(lfsr: Lfsr) -> tuple[int, int]:
    """Advance one step; returns (output bit, next state)."""
    bit = lfsr.step()
    return bit, lfsr.state


def lfsr_period(lfsr: Lfsr, limit: Optional[int] = None) -> tuple[int, int]:
    """Brute-force (period, ones per period) starting from the current state."""
    probe = Lfsr(lfsr.state, lfsr.width, lfsr.taps)
    probe._cache = None
    start = probe.state
    limit = (1 << lfsr.width) if limit is None else limit
    ones = 0
    for k in range(1, limit + 1):
        ones += probe.step()
        if probe.state == start:
            return k, ones
    raise RuntimeError(f"no period found within {limit} steps")


# ---------------------------------------------------------------------------
# modulator


@dataclass(frozen=True)
class DaalenModulator:
    """Turns M fair bits into one bit that is 1 with probability ``target.value``.

    Chain recurrence, LSB first: ``s = r_k | s`` where target bit k is 1,
    ``s = r_k & s`` where it is 0, starting from ``s = 0``.
    """

    target: QFraction

    @property
    def width(self) -> int:
        return self.target.width


def daalen_bit(mod: DaalenModulator, random_bits: Sequence[int]) -> int:
    m = mod.width
    if len(random_bits) != m:
        raise ValueError(f"modulator of width {m} needs exactly {m} random bits, got {len(random_bits)}")
    s = 0
    for k in range(m):
        r = int(random_bits[k]) & 1
        s = (r | s) if (mod.target.bits >> k) & 1 else (r & s)
    return s


def modulate(target_bits, m: int, random_bits: np.ndarray) -> np.ndarray:
    """Vectorized ``daalen_bit``: ``random_bits`` has shape (..., m), LSB column first.

    ``target_bits`` broadcasts against the leading axes.
    """
    r = np.asarray(random_bits, dtype=np.uint8)
    if r.shape[-1] != m:
        raise ValueError(f"expected {m} random bits per output, got {r.shape[-1]}")
    target = np.asarray(target_bits, dtype=np.uint64)
    s = np.zeros(np.broadcast_shapes(r.shape[:-1], target.shape), dtype=np.uint8)
    for k in range(m):
        tk = ((target >> np.uint64(k)) & np.uint64(1)).astype(bool)
        rk = r[..., k]
        s = np.where(tk, rk | s, rk & s)
    return s


# ---------------------------------------------------------------------------
# select streams


class SelectStream:
    """Emits select indices in 1..N, one per cycle."""

    def __init__(self, n: int):
        self.n = _check_n(n)
        self.n_bits = n.bit_length() - 1

    def select_bits(self, cycles: int) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def draw(self, cycles: int) -> np.ndarray:
        bits = self.select_bits(cycles).astype(np.int64)
        weights = 1 << np.arange(self.n_bits, dtype=np.int64)
        return 1 + bits @ weights

    def __iter__(self):
        return self

    def __next__(self) -> int:
        return int(self.draw(1)[0])


class IdealSelectStream(SelectStream):
    """Exact rational Bernoulli select bits from a RandomSource."""

    def __init__(self, n: int, rng: RandomSource):
        super().__init__(n)
        self.rng = rng
        self.specs = select_bit_probabilities(n)

    def select_bits(self, cycles):
        cols = [self.rng.integers(0, s.den, cycles) < s.num for s in self.specs]
        return np.stack(cols, axis=-1).astype(np.uint8)


class LfsrSelectStream(SelectStream):
    """One LFSR plus one modulator per select bit."""

    def __init__(self, n: int, m: int, lfsrs: Sequence[Lfsr]):
        super().__init__(n)
        if len(lfsrs) != self.n_bits:
            raise ValueError(f"need {self.n_bits} LFSRs, got {len(lfsrs)}")
        self.m = m
        self.lfsrs = list(lfsrs)
        self.targets = modulator_targets(n, m)

    def select_bits(self, cycles):
        cols = []
        for lf, target in zip(self.lfsrs, self.targets):
            r = lf.take(cycles * self.m).reshape(cycles, self.m)
            cols.append(modulate(target.bits, self.m, r))
        return np.stack(cols, axis=-1)


class SingleLfsrSelectStream(SelectStream):
    """One base LFSR; modulator j reads register bit ``delays[j]`` at each step.

    Every cycle advances the register by M steps.  Because register bit d
    equals the output d steps ahead, modulator j sees the base bitstream
    delayed by ``delays[j]``.
    """

    def __init__(self, n: int, m: int, lfsr: Lfsr, delays: Optional[Sequence[int]] = None):
        super().__init__(n)
        self.m = m
        self.lfsr = lfsr
        if delays is None:
            spacing = max(1, lfsr.width // max(1, self.n_bits))
            delays = [(j * spacing) % lfsr.width for j in range(self.n_bits)]
        if len(set(delays)) != len(delays) or any(not 0 <= d < lfsr.width for d in delays):
            raise ValueError("modulator taps must be distinct register positions")
        self.delays = tuple(delays)
        self.targets = modulator_targets(n, m)

    def select_bits(self, cycles):
        span = cycles * self.m
        window = self.lfsr.peek(span + max(self.delays))
        self.lfsr.take(span)
        cols = []
        for d, target in zip(self.delays, self.targets):
            r = window[d:d + span].reshape(cycles, self.m)
            cols.append(modulate(target.bits, self.m, r))
        return np.stack(cols, axis=-1)


def _seeded_lfsr(config: MuxRounderConfig, rng: RandomSource) -> Lfsr:
    state = int(rng.integers(1, 1 << config.lfsr_width))
    return Lfsr(state, config.lfsr_width, config.lfsr_taps)


def make_select_stream(config: MuxRounderConfig, rng: RandomSource) -> SelectStream:
    """Build the select generator for one rounder lane (or for the whole
    network in the shared modes; broadcasting is done by the caller)."""
    src = config.select_source
    n, m = config.n_inputs, config.modulator_width
    if src is SelectSource.IDEAL_EXACT:
        return IdealSelectStream(n, rng)
    if src in (SelectSource.INDEPENDENT_LFSR, SelectSource.SHARED_SINGLE_PRBS):
        lfsrs = [_seeded_lfsr(config, rng.derive("sel", j)) for j in range(1, n.bit_length())]
        return LfsrSelectStream(n, m, lfsrs)
    return SingleLfsrSelectStream(n, m, _seeded_lfsr(config, rng.derive("base")))


# ---------------------------------------------------------------------------
# weight projection


def hw_project_ternary(w: SignMagnitudeWeight, sel: int, n: Optional[int] = None) -> int:
    if n is not None and w.magnitude.width != n:
        raise ValueError(f"magnitude width {w.magnitude.width} != rounder width {n}")
    return w.sign * mux_out(w.magnitude.bits, sel, w.magnitude.width)


def route(signs: np.ndarray, bits: np.ndarray, sel: np.ndarray) -> np.ndarray:
    """Vectorized ``hw_project_ternary``."""
    shift = (np.asarray(sel, dtype=np.uint64) - np.uint64(1))
    out = (np.asarray(bits, dtype=np.uint64) >> shift) & np.uint64(1)
    return (signs.astype(np.int8) * out.astype(np.int8)).astype(np.int8)


def hw_project_model(model: NetworkModel, config: MuxRounderConfig, rng: RandomSource,
                     lanes: int = 1) -> DiscreteModelInstance:
    """Project every weight through multiplexer rounders.

    Output feature ``o`` of a layer is handled by lane ``o % lanes``; each lane
    walks its features in order and their weights row-major, one weight per
    cycle.  Independent modes give each (layer, lane) its own generator; the
    shared modes run one generator for the whole network and broadcast each
    cycle's select index to every lane.
    """
    if lanes < 1:
        raise ValueError("lanes must be >= 1")
    n = config.n_inputs
    shared = make_select_stream(config, rng.derive("shared")) if config.select_source.shared else None
    out = []
    for li, w in enumerate(model.weights):
        if w is None:
            out.append(None)
            continue
        signs, bits = encode_sign_magnitude(w, n)
        n_out = w.shape[0]
        per = w[0].size
        cycles = -(-n_out // lanes) * per
        if shared is not None:
            sel_lanes = np.broadcast_to(shared.draw(cycles), (lanes, cycles))
        else:
            sel_lanes = np.stack([make_select_stream(config, rng.derive("layer", li, "lane", l)).draw(cycles)
                                  for l in range(lanes)])
        o = np.arange(n_out)
        pos = (o // lanes)[:, None] * per + np.arange(per)[None, :]
        sel = sel_lanes[(o % lanes)[:, None], pos].reshape(w.shape)
        out.append(route(signs, bits, sel))
    prov = {"sampler": "hardware", "lanes": lanes, **config.to_dict()}
    return DiscreteModelInstance(model.layers, model.input_shape, out, model.biases, model.scales,
                                 ProjectionMode.TERNARY, provenance=prov)
