"""Network, weight and fixed-point types plus the model container format.

Tensors are plain numpy arrays in canonical (batch, channel, height, width)
order; per-example shapes drop the batch axis.  Conv weights are
(out, in, 3, 3), fully connected weights are (out, in).
"""

from __future__ import annotations

import enum
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

MAGIC = "BSTM1"
FORMAT_VERSION = 1
VALID_WIDTHS = (2, 4, 8, 16, 32)


class ModelFormatError(ValueError):
    """Raised when a model container cannot be decoded."""


class LayerKind(str, enum.Enum):
    CONV3X3 = "conv3x3"
    MAXPOOL2 = "maxpool2"
    FC = "fc"
    SIGN = "sign"
    RELU = "relu"
    BN_AFFINE = "bn_affine"
    SQUARE_HINGE = "square_hinge"


WEIGHTED_KINDS = (LayerKind.CONV3X3, LayerKind.FC)


class ProjectionMode(str, enum.Enum):
    TERNARY = "ternary"
    BINARY = "binary"


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the topology.

    ``in_size``/``out_size`` are channel counts for conv layers, unit counts
    for fully connected layers, the channel count for the batch-norm affine
    and the class count for the square hinge output.  Activations and
    pooling leave both at zero.
    """

    kind: LayerKind
    in_size: int = 0
    out_size: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.kind in WEIGHTED_KINDS and (self.in_size < 1 or self.out_size < 1):
            raise ValueError(f"{self.kind.value} layer needs positive extents")
        if self.kind in (LayerKind.BN_AFFINE, LayerKind.SQUARE_HINGE):
            if self.in_size < 1 or self.in_size != self.out_size:
                raise ValueError(f"{self.kind.value} layer needs in_size == out_size >= 1")

    @property
    def weighted(self) -> bool:
        return self.kind in WEIGHTED_KINDS

    def weight_shape(self) -> Optional[tuple[int, ...]]:
        if self.kind is LayerKind.CONV3X3:
            return (self.out_size, self.in_size, 3, 3)
        if self.kind is LayerKind.FC:
            return (self.out_size, self.in_size)
        return None

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "in": self.in_size, "out": self.out_size}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(LayerKind(d["kind"]), int(d.get("in", 0)), int(d.get("out", 0)))


def infer_shapes(layers: Sequence[LayerSpec], input_shape: Sequence[int]) -> list[tuple[int, ...]]:
    """Per-example output shape of every layer; raises on inconsistent chains."""
    shape = tuple(int(s) for s in input_shape)
    if not shape or any(s < 1 for s in shape):
        raise ValueError(f"bad input shape {shape}")
    out = []
    for i, layer in enumerate(layers):
        k = layer.kind
        if k is LayerKind.CONV3X3:
            if len(shape) != 3 or shape[0] != layer.in_size:
                raise ValueError(f"layer {i}: conv3x3 expects ({layer.in_size}, H, W), got {shape}")
            shape = (layer.out_size, shape[1], shape[2])
        elif k is LayerKind.MAXPOOL2:
            if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                raise ValueError(f"layer {i}: maxpool2 expects (C, H>=2, W>=2), got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif k is LayerKind.FC:
            if math.prod(shape) != layer.in_size:
                raise ValueError(f"layer {i}: fc expects {layer.in_size} inputs, got {shape}")
            shape = (layer.out_size,)
        elif k is LayerKind.BN_AFFINE:
            if shape[0] != layer.in_size:
                raise ValueError(f"layer {i}: bn_affine expects {layer.in_size} channels, got {shape}")
        elif k is LayerKind.SQUARE_HINGE:
            if shape != (layer.in_size,):
                raise ValueError(f"layer {i}: square_hinge expects ({layer.in_size},), got {shape}")
        out.append(shape)
    return out


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def _check_params(layers, weights, biases, scales):
    n = len(layers)
    if not (len(weights) == len(biases) == len(scales) == n):
        raise ValueError("parameter lists must have one entry per layer")
    for i, layer in enumerate(layers):
        w, b, s = weights[i], biases[i], scales[i]
        if layer.weighted:
            if w is None or w.shape != layer.weight_shape():
                got = None if w is None else w.shape
                raise ValueError(f"layer {i}: weight shape {got} != {layer.weight_shape()}")
            if b is None or b.shape != (layer.out_size,):
                raise ValueError(f"layer {i}: bias must have shape ({layer.out_size},)")
            if s is not None:
                raise ValueError(f"layer {i}: unexpected scale tensor")
        elif layer.kind is LayerKind.BN_AFFINE:
            if w is not None:
                raise ValueError(f"layer {i}: bn_affine carries no projected weight")
            for name, t in (("scale", s), ("shift", b)):
                if t is None or t.shape != (layer.in_size,):
                    raise ValueError(f"layer {i}: bn {name} must have shape ({layer.in_size},)")
        elif w is not None or b is not None or s is not None:
            raise ValueError(f"layer {i}: {layer.kind.value} has no parameters")
    for t in list(biases) + list(scales):
        if t is not None and not np.all(np.isfinite(t)):
            raise ValueError("non-finite bias or scale")


@dataclass(frozen=True)
class NetworkModel:
    """Topology plus high-precision shadow weights clipped to [-1, 1].

    ``biases`` holds conv/fc biases and the batch-norm shift; ``scales`` holds
    the batch-norm scale.  Neither is ever projected or clipped.
    """

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    weights: tuple[Optional[np.ndarray], ...]
    biases: tuple[Optional[np.ndarray], ...]
    scales: tuple[Optional[np.ndarray], ...]
    clipped_on_load: int = 0

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        conv = lambda ts: tuple(None if t is None else _frozen(t, np.float64) for t in ts)
        object.__setattr__(self, "weights", conv(self.weights))
        object.__setattr__(self, "biases", conv(self.biases))
        object.__setattr__(self, "scales", conv(self.scales))
        _check_params(layers, self.weights, self.biases, self.scales)
        for i, w in enumerate(self.weights):
            if w is None:
                continue
            if not np.all(np.isfinite(w)):
                raise ValueError(f"layer {i}: non-finite weights")
            if np.max(np.abs(w), initial=0.0) > 1.0:
                raise ValueError(f"layer {i}: shadow weights must lie in [-1, 1]; clip first")
        infer_shapes(layers, self.input_shape)

    @property
    def num_classes(self) -> int:
        return infer_shapes(self.layers, self.input_shape)[-1][0]

    def max_abs_weight(self) -> float:
        return max((float(np.max(np.abs(w), initial=0.0)) for w in self.weights if w is not None),
                   default=0.0)

    def replace_params(self, weights=None, biases=None, scales=None) -> "NetworkModel":
        return NetworkModel(self.layers, self.input_shape,
                            self.weights if weights is None else weights,
                            self.biases if biases is None else biases,
                            self.scales if scales is None else scales)


@dataclass(frozen=True)
class DiscreteModelInstance:
    """One stochastic projection of a NetworkModel: integer weights, real biases."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    weights: tuple[Optional[np.ndarray], ...]
    biases: tuple[Optional[np.ndarray], ...]
    scales: tuple[Optional[np.ndarray], ...]
    mode: ProjectionMode
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "mode", ProjectionMode(self.mode))
        object.__setattr__(self, "weights",
                           tuple(None if t is None else _frozen(t, np.int8) for t in self.weights))
        real = lambda ts: tuple(None if t is None else _frozen(t, np.float64) for t in ts)
        object.__setattr__(self, "biases", real(self.biases))
        object.__setattr__(self, "scales", real(self.scales))
        _check_params(layers, self.weights, self.biases, self.scales)
        allowed = (-1, 0, 1) if self.mode is ProjectionMode.TERNARY else (-1, 1)
        for i, w in enumerate(self.weights):
            if w is not None and not np.all(np.isin(w, allowed)):
                raise ValueError(f"layer {i}: weights outside the {self.mode.value} alphabet")
        infer_shapes(layers, self.input_shape)

    @property
    def num_classes(self) -> int:
        return infer_shapes(self.layers, self.input_shape)[-1][0]

    def same_weights(self, other: "DiscreteModelInstance") -> bool:
        return all((a is None and b is None) or np.array_equal(a, b)
                   for a, b in zip(self.weights, other.weights))


# ---------------------------------------------------------------------------
# scalar helpers and fixed-point encodings


def clip(w):
    """Saturate to [-1, 1].  Works on scalars and arrays; rejects non-finite input."""
    a = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("clip: non-finite input")
    out = np.clip(a, -1.0, 1.0)
    return float(out) if out.ndim == 0 else out


def _check_width(width: int) -> int:
    if width not in VALID_WIDTHS:
        raise ValueError(f"invalid fraction width {width}; expected one of {VALID_WIDTHS}")
    return width


@dataclass(frozen=True)
class QFraction:
    """Unsigned N-bit binary fraction ``bits / 2**width``; bit N-1 is the MSB."""

    bits: int
    width: int = 8

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("width must be positive")
        if not 0 <= self.bits < (1 << self.width):
            raise ValueError(f"bits {self.bits} out of range for width {self.width}")

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.bits, 1 << self.width)

    @property
    def value(self) -> float:
        return self.bits / (1 << self.width)

    def bit(self, i: int) -> int:
        """``in_i`` with 1-based index (``in_1`` is the LSB)."""
        return (self.bits >> (i - 1)) & 1


@dataclass(frozen=True)
class SignMagnitudeWeight:
    sign: int
    magnitude: QFraction

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")

    @property
    def value(self) -> float:
        return self.sign * self.magnitude.value


def to_sign_magnitude(w: float, width: int = 8) -> SignMagnitudeWeight:
    _check_width(width)
    if not math.isfinite(w) or abs(w) > 1.0:
        raise ValueError(f"to_sign_magnitude expects |w| <= 1, got {w}")
    signs, bits = encode_sign_magnitude(np.array([w]), width)
    return SignMagnitudeWeight(int(signs[0]), QFraction(int(bits[0]), width))


def encode_sign_magnitude(w: np.ndarray, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized sign-magnitude encoding: (signs int8, magnitude bits uint64).

    Magnitudes round half-to-even and saturate at ``2**width - 1``.
    """
    _check_width(width)
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)) or np.any(np.abs(w) > 1.0):
        raise ValueError("encode_sign_magnitude expects finite |w| <= 1")
    signs = np.where(w >= 0, 1, -1).astype(np.int8)
    scaled = np.rint(np.abs(w) * float(1 << width))
    bits = np.minimum(scaled, float((1 << width) - 1)).astype(np.uint64)
    return signs, bits


def decode_sign_magnitude(signs: np.ndarray, bits: np.ndarray, width: int) -> np.ndarray:
    return signs.astype(np.float64) * (bits.astype(np.float64) / float(1 << width))


# ---------------------------------------------------------------------------
# container format

ModelLike = Union[NetworkModel, DiscreteModelInstance]


def _signmag_dtype(width: int):
    if width < 16:
        return np.dtype("<u2")
    if width < 32:
        return np.dtype("<u4")
    return np.dtype("<u8")


def _blob(arr: np.ndarray, dtype) -> bytes:
    data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
    return struct.pack("<Q", len(data)) + data


def store_model(model: ModelLike, path, weight_dtype: Optional[str] = None,
                provenance: Optional[dict] = None) -> None:
    """Write a model container.

    ``weight_dtype`` defaults to ``real64`` for NetworkModel and ``int8-ternary``
    for DiscreteModelInstance; ``signmag-N`` stores a NetworkModel as N-bit
    sign-magnitude weights (lossy, see ``encode_sign_magnitude``).
    """
    discrete = isinstance(model, DiscreteModelInstance)
    if weight_dtype is None:
        weight_dtype = "int8-ternary" if discrete else "real64"
    if discrete != (weight_dtype == "int8-ternary"):
        raise ValueError(f"weight dtype {weight_dtype!r} does not match {type(model).__name__}")
    width = None
    if weight_dtype.startswith("signmag-"):
        width = _check_width(int(weight_dtype.split("-", 1)[1]))
    elif weight_dtype not in ("real64", "int8-ternary"):
        raise ValueError(f"unknown weight dtype {weight_dtype!r}")

    header = {
        "magic": MAGIC,
        "version": FORMAT_VERSION,
        "kind": "instance" if discrete else "network",
        "weight_dtype": weight_dtype,
        "input_shape": list(model.input_shape),
        "layers": [l.to_dict() for l in model.layers],
    }
    if discrete:
        header["projection_mode"] = model.mode.value
        prov = dict(model.provenance)
        prov.update(provenance or {})
    else:
        prov = dict(provenance or {})
    if prov:
        header["provenance"] = prov

    blobs = []
    for i, layer in enumerate(model.layers):
        w = model.weights[i]
        if w is not None:
            if weight_dtype == "real64":
                blobs.append(_blob(w, "<f8"))
            elif weight_dtype == "int8-ternary":
                blobs.append(_blob(w, "<i1"))
            else:
                signs, bits = encode_sign_magnitude(w, width)
                packed = bits | (signs < 0).astype(np.uint64) << np.uint64(width)
                blobs.append(_blob(packed, _signmag_dtype(width)))
        if model.scales[i] is not None:
            blobs.append(_blob(model.scales[i], "<f8"))
        if model.biases[i] is not None:
            blobs.append(_blob(model.biases[i], "<f8"))

    text = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC.encode("ascii") + b"\n")
        f.write(text + b"\n")
        for b in blobs:
            f.write(b)


def read_header(path) -> dict:
    with open(path, "rb") as f:
        header, _ = _split_header(f.read())
    return header


def _split_header(raw: bytes) -> tuple[dict, memoryview]:
    first = raw.find(b"\n")
    if first < 0 or raw[:first] != MAGIC.encode("ascii"):
        raise ModelFormatError("malformed header: bad magic")
    second = raw.find(b"\n", first + 1)
    if second < 0:
        raise ModelFormatError("malformed header: unterminated header")
    try:
        header = json.loads(raw[first + 1:second].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"malformed header: {e}") from None
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise ModelFormatError("malformed header: magic field missing")
    if header.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"malformed header: unsupported version {header.get('version')}")
    return header, memoryview(raw)[second + 1:]


class _BlobReader:
    def __init__(self, payload: memoryview):
        self.buf = payload
        self.pos = 0

    def take(self, dtype, shape) -> np.ndarray:
        dtype = np.dtype(dtype)
        if self.pos + 8 > len(self.buf):
            raise ModelFormatError("payload length mismatch: missing blob length")
        (n,) = struct.unpack_from("<Q", self.buf, self.pos)
        self.pos += 8
        expected = math.prod(shape) * dtype.itemsize
        if n != expected:
            raise ModelFormatError(f"shape mismatch: blob holds {n} bytes, expected {expected} for {shape}")
        if self.pos + n > len(self.buf):
            raise ModelFormatError("payload length mismatch: truncated blob")
        arr = np.frombuffer(self.buf, dtype=dtype, count=math.prod(shape), offset=self.pos)
        self.pos += n
        return arr.reshape(shape).copy()

    def finish(self):
        if self.pos != len(self.buf):
            raise ModelFormatError(f"payload length mismatch: {len(self.buf) - self.pos} trailing bytes")


def load_model(path) -> ModelLike:
    """Read a container written by ``store_model``.

    Real shadow weights are clipped into [-1, 1]; the number of altered
    values is stored in ``clipped_on_load`` and reported with a warning.
    """
    raw = Path(path).read_bytes()
    header, payload = _split_header(raw)
    try:
        layers = tuple(LayerSpec.from_dict(d) for d in header["layers"])
        input_shape = tuple(int(s) for s in header["input_shape"])
        dtype_tag = header["weight_dtype"]
        infer_shapes(layers, input_shape)
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFormatError(f"malformed header: {e}") from None

    width = None
    if dtype_tag.startswith("signmag-"):
        try:
            width = _check_width(int(dtype_tag.split("-", 1)[1]))
        except ValueError as e:
            raise ModelFormatError(f"malformed header: {e}") from None
    elif dtype_tag not in ("real64", "int8-ternary"):
        raise ModelFormatError(f"malformed header: unknown weight dtype {dtype_tag!r}")

    reader = _BlobReader(payload)
    weights, biases, scales = [], [], []
    for layer in layers:
        w = b = s = None
        if layer.weighted:
            shape = layer.weight_shape()
            if dtype_tag == "real64":
                w = reader.take("<f8", shape)
            elif dtype_tag == "int8-ternary":
                w = reader.take("<i1", shape)
            else:
                packed = reader.take(_signmag_dtype(width), shape).astype(np.uint64)
                signs = np.where(packed >> np.uint64(width), -1, 1).astype(np.int8)
                bits = packed & np.uint64((1 << width) - 1)
                w = decode_sign_magnitude(signs, bits, width)
            b = reader.take("<f8", (layer.out_size,))
        elif layer.kind is LayerKind.BN_AFFINE:
            s = reader.take("<f8", (layer.in_size,))
            b = reader.take("<f8", (layer.in_size,))
        weights.append(w)
        biases.append(b)
        scales.append(s)
    reader.finish()

    for t in weights + biases + scales:
        if t is not None and t.dtype.kind == "f" and not np.all(np.isfinite(t)):
            raise ModelFormatError("non-finite values in payload (NaN weights)")

    try:
        if dtype_tag == "int8-ternary":
            return DiscreteModelInstance(layers, input_shape, weights, biases, scales,
                                         ProjectionMode(header.get("projection_mode", "ternary")),
                                         provenance=header.get("provenance", {}))
        clipped = 0
        for i, w in enumerate(weights):
            if w is not None:
                clipped += int(np.count_nonzero(np.abs(w) > 1.0))
                weights[i] = np.clip(w, -1.0, 1.0)
        if clipped:
            warnings.warn(f"{path}: clipped {clipped} shadow weight(s) into [-1, 1]", stacklevel=2)
        return NetworkModel(layers, input_shape, weights, biases, scales, clipped_on_load=clipped)
    except ValueError as e:
        raise ModelFormatError(str(e)) from None
