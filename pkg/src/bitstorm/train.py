"""Toy-scale projected-gradient training.

Every step draws a fresh discrete projection of the shadow weights, runs the
forward and backward pass with the discrete weights, and applies the
resulting gradient to the shadow weights, which are then clipped back into
[-1, 1].  Gradients pass through the sign activation with a straight-through
estimator.  The optimizer is plain SGD with exponential learning-rate decay.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .ensemble import error_rate
from .inference import im2col, maxpool2
from .model import LayerKind, LayerSpec, NetworkModel, ProjectionMode, clip
from .projection import RandomSource, project, project_weights

_TOKEN = re.compile(r"^(?:(\d+)(C3|FC|SVM)|MP2)$")


def parse_topology(topology: str, input_shape: Sequence[int], activation: str = "sign",
                   batchnorm: bool = True) -> list[LayerSpec]:
    """Layer list from compact notation such as ``128C3-MP2-1024FC-10SVM``.

    Each C3/FC token expands to the layer, an optional batch-norm affine and
    the activation; the closing ``nSVM`` token is an FC layer with n outputs,
    a batch-norm affine and the square hinge output.
    """
    act = {"sign": LayerKind.SIGN, "relu": LayerKind.RELU}.get(activation)
    if act is None:
        raise ValueError(f"unknown activation {activation!r}")
    tokens = [t for t in topology.replace(" ", "").split("-") if t]
    if not tokens:
        raise ValueError("empty topology")
    shape = tuple(int(s) for s in input_shape)
    layers: list[LayerSpec] = []
    for pos, tok in enumerate(tokens):
        m = _TOKEN.match(tok)
        if m is None:
            raise ValueError(f"unknown topology token {tok!r}")
        count, kind = m.group(1), m.group(2)
        if kind == "SVM" and pos != len(tokens) - 1:
            raise ValueError("the SVM output must be the last token")
        if kind is None:
            layers.append(LayerSpec(LayerKind.MAXPOOL2))
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
            continue
        n = int(count)
        if kind == "C3":
            layers.append(LayerSpec(LayerKind.CONV3X3, shape[0], n))
            shape = (n,) + shape[1:]
        else:
            layers.append(LayerSpec(LayerKind.FC, math.prod(shape), n))
            shape = (n,)
        if batchnorm or kind == "SVM":
            layers.append(LayerSpec(LayerKind.BN_AFFINE, n, n))
        layers.append(LayerSpec(LayerKind.SQUARE_HINGE, n, n) if kind == "SVM" else LayerSpec(act))
    if layers[-1].kind is not LayerKind.SQUARE_HINGE:
        raise ValueError("topology must end with an nSVM output")
    return layers


def init_model(layers: Sequence[LayerSpec], input_shape: Sequence[int], seed: int = 0) -> NetworkModel:
    """Uniform Glorot-range weights (clipped), zero biases, BN scale 1/sqrt(fan_in)."""
    rng = RandomSource(seed).derive("init")
    weights, biases, scales = [], [], []
    fan_in = 1
    for i, layer in enumerate(layers):
        w = b = s = None
        if layer.weighted:
            rf = 9 if layer.kind is LayerKind.CONV3X3 else 1
            fan_in, fan_out = layer.in_size * rf, layer.out_size * rf
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            w = clip((rng.derive("w", i).uniform(layer.weight_shape()) * 2.0 - 1.0) * lim)
            b = np.zeros(layer.out_size)
        elif layer.kind is LayerKind.BN_AFFINE:
            s = np.full(layer.in_size, 1.0 / math.sqrt(fan_in))
            b = np.zeros(layer.in_size)
        weights.append(w)
        biases.append(b)
        scales.append(s)
    return NetworkModel(layers, input_shape, weights, biases, scales)


def build_model(topology: str, input_shape: Sequence[int], activation: str = "sign",
                batchnorm: bool = True, seed: int = 0) -> NetworkModel:
    return init_model(parse_topology(topology, input_shape, activation, batchnorm), input_shape, seed)


# ---------------------------------------------------------------------------
# loss and gradients


def square_hinge_loss(scores, target: int, num_classes: int) -> tuple[float, np.ndarray]:
    """mean_c max(0, 1 - t_c y_c)^2 with t = +1 for the target class, -1 elsewhere."""
    if not 0 <= target < num_classes:
        raise ValueError(f"target {target} outside [0, {num_classes})")
    y = np.asarray(scores, dtype=np.float64)
    if y.shape != (num_classes,):
        raise ValueError(f"expected {num_classes} scores, got shape {y.shape}")
    t = np.where(np.arange(num_classes) == target, 1.0, -1.0)
    h = np.maximum(0.0, 1.0 - t * y)
    return float(np.mean(h ** 2)), -2.0 * t * h / num_classes


def batch_square_hinge(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of ``square_hinge_loss`` and its gradient wrt the scores."""
    B, C = scores.shape
    t = np.where(np.arange(C)[None, :] == labels[:, None], 1.0, -1.0)
    h = np.maximum(0.0, 1.0 - t * scores)
    loss = float(np.mean(np.mean(h ** 2, axis=1)))
    return loss, -2.0 * t * h / C / B


def ste_backward(grad_out, pre_activation, window: float = 1.0):
    """Straight-through gradient of sign(): pass where |x| <= window, else 0."""
    g = np.asarray(grad_out, dtype=np.float64)
    x = np.asarray(pre_activation, dtype=np.float64)
    if g.shape != x.shape:
        raise ValueError(f"shape mismatch {g.shape} vs {x.shape}")
    return np.where(np.abs(x) <= window, g, 0.0)


def _col2im(dcols: np.ndarray, shape) -> np.ndarray:
    B, C, H, W = shape
    d = dcols.reshape(B, H, W, C, 3, 3)
    dxp = np.zeros((B, C, H + 2, W + 2))
    for dy in range(3):
        for dx in range(3):
            dxp[:, :, dy:dy + H, dx:dx + W] += d[..., dy, dx].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1]


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class BatchNormState:
    """Training-time batch norm: learned gamma/beta plus running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray

    def folded(self) -> tuple[np.ndarray, np.ndarray]:
        """Inference affine (scale, shift) from the running statistics."""
        scale = self.gamma / np.sqrt(self.var + BN_EPS)
        return scale, self.beta - scale * self.mean


@dataclass(frozen=True)
class TrainState:
    """Shadow weights plus batch-norm training state.

    The ``model`` BN slots are ignored while training; ``to_model`` folds the
    running statistics back into the per-channel affine.
    """

    model: NetworkModel
    bn: tuple[Optional[BatchNormState], ...]

    @classmethod
    def from_model(cls, model: NetworkModel) -> "TrainState":
        # mean 0, var 1 - eps folds back onto the stored affine
        bn = tuple(None if s is None else
                   BatchNormState(s.copy(), model.biases[i].copy(), np.zeros_like(s),
                                  np.full_like(s, 1.0 - BN_EPS))
                   for i, s in enumerate(model.scales))
        return cls(model, bn)

    def to_model(self) -> NetworkModel:
        if all(b is None for b in self.bn):
            return self.model
        biases, scales = list(self.model.biases), list(self.model.scales)
        for i, b in enumerate(self.bn):
            if b is not None:
                scales[i], biases[i] = b.folded()
        return self.model.replace_params(biases=biases, scales=scales)


def _forward_cached(model: NetworkModel, weights, x: np.ndarray, bn=None):
    caches = []
    for i, layer in enumerate(model.layers):
        k = layer.kind
        if k is LayerKind.FC:
            x2 = x.reshape(x.shape[0], -1)
            caches.append((x2, x.shape))
            x = x2 @ weights[i].T + model.biases[i]
        elif k is LayerKind.CONV3X3:
            B, C, H, W = x.shape
            cols = im2col(x)
            caches.append((cols, x.shape))
            wf = weights[i].reshape(weights[i].shape[0], -1)
            x = (cols @ wf.T + model.biases[i]).transpose(0, 2, 1).reshape(B, -1, H, W)
        elif k is LayerKind.MAXPOOL2:
            caches.append(x)
            x = maxpool2(x)
        elif k is LayerKind.SIGN:
            caches.append(x)
            x = np.where(x >= 0, 1.0, -1.0)
        elif k is LayerKind.RELU:
            caches.append(x)
            x = np.maximum(x, 0.0)
        elif k is LayerKind.BN_AFFINE:
            axes = (0,) + tuple(range(2, x.ndim))
            shape = (1, -1) + (1,) * (x.ndim - 2)
            if bn is not None and bn[i] is not None:
                mu = x.mean(axis=axes)
                var = x.var(axis=axes)
                inv = 1.0 / np.sqrt(var + BN_EPS)
                xhat = (x - mu.reshape(shape)) * inv.reshape(shape)
                caches.append(("batch", xhat, inv, mu, var))
                x = xhat * bn[i].gamma.reshape(shape) + bn[i].beta.reshape(shape)
            else:
                caches.append(("affine", x))
                x = x * model.scales[i].reshape(shape) + model.biases[i].reshape(shape)
        else:
            caches.append(None)
    return x, caches


def _maxpool_backward(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    B, C, H, W = x.shape
    H2, W2 = H // 2, W // 2
    win = x[:, :, :2 * H2, :2 * W2].reshape(B, C, H2, 2, W2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, H2, W2, 4)
    onehot = np.eye(4)[np.argmax(win, axis=-1)] * g[..., None]
    dx = np.zeros_like(x)
    dx[:, :, :2 * H2, :2 * W2] = (onehot.reshape(B, C, H2, W2, 2, 2)
                                  .transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * H2, 2 * W2))
    return dx


def _backward(model: NetworkModel, weights, caches, g: np.ndarray, ste_window: float, bn=None):
    """Gradients per layer: (weight, bias-or-beta, scale-or-gamma)."""
    n = len(model.layers)
    dW, db, ds = [None] * n, [None] * n, [None] * n
    for i in reversed(range(n)):
        layer, cache = model.layers[i], caches[i]
        k = layer.kind
        if k is LayerKind.FC:
            x2, xshape = cache
            dW[i] = g.T @ x2
            db[i] = g.sum(axis=0)
            g = (g @ weights[i]).reshape(xshape)
        elif k is LayerKind.CONV3X3:
            cols, xshape = cache
            B, O = g.shape[:2]
            gg = g.reshape(B, O, -1).transpose(0, 2, 1)
            wf = weights[i].reshape(O, -1)
            dW[i] = np.einsum("bpo,bpk->ok", gg, cols).reshape(weights[i].shape)
            db[i] = g.sum(axis=(0, 2, 3))
            g = _col2im(gg @ wf, xshape)
        elif k is LayerKind.MAXPOOL2:
            g = _maxpool_backward(g, cache)
        elif k is LayerKind.SIGN:
            g = ste_backward(g, cache, ste_window)
        elif k is LayerKind.RELU:
            g = np.where(cache > 0, g, 0.0)
        elif k is LayerKind.BN_AFFINE:
            axes = (0,) + tuple(range(2, g.ndim))
            shape = (1, -1) + (1,) * (g.ndim - 2)
            if cache[0] == "batch":
                _, xhat, inv, _, _ = cache
                m = g.size // g.shape[1]
                ds[i] = (g * xhat).sum(axis=axes)
                db[i] = g.sum(axis=axes)
                gx = g * bn[i].gamma.reshape(shape)
                g = (inv.reshape(shape) / m) * (m * gx - gx.sum(axis=axes).reshape(shape)
                                                - xhat * (gx * xhat).sum(axis=axes).reshape(shape))
            else:
                x = cache[1]
                ds[i] = (g * x).sum(axis=axes)
                db[i] = g.sum(axis=axes)
                g = g * model.scales[i].reshape(shape)
    return dW, db, ds


def loss_and_grads(model: NetworkModel, weights, x: np.ndarray, labels: np.ndarray,
                   ste_window: float = 1.0, bn=None):
    """Square-hinge batch loss and gradients wrt (weights, biases, scales).

    With ``bn`` given, batch-norm layers normalise with batch statistics and
    the bias/scale gradients of those layers are wrt beta/gamma.  Returns
    ``(loss, dW, db, ds, caches)``.
    """
    scores, caches = _forward_cached(model, weights, np.asarray(x, dtype=np.float64), bn)
    loss, g = batch_square_hinge(scores, labels)
    return (loss,) + _backward(model, weights, caches, g, ste_window, bn) + (caches,)


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    """``projection=None`` trains with the real shadow weights (plain SGD)."""

    epochs: int = 50
    learning_rate: float = 0.3
    lr_decay: float = 0.97
    batch_size: int = 8
    projection: Optional[ProjectionMode] = ProjectionMode.TERNARY
    seed: int = 0
    ste_window: float = 1.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate < 0 or self.lr_decay <= 0:
            raise ValueError("learning rate must be >= 0 and decay > 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.projection is not None:
            object.__setattr__(self, "projection", ProjectionMode(self.projection))

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during ``epoch`` (1-based)."""
        return self.learning_rate * self.lr_decay ** (epoch - 1)

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "learning_rate": self.learning_rate,
                "lr_decay": self.lr_decay, "batch_size": self.batch_size,
                "projection": None if self.projection is None else self.projection.value,
                "seed": self.seed, "ste_window": self.ste_window, "optimizer": "sgd"}


def projected_sgd_step(state, batch: Dataset, config: TrainConfig, rng: RandomSource,
                       lr: Optional[float] = None):
    """One projected SGD step on a batch.

    ``state`` is a TrainState or a NetworkModel; the result has the same type,
    paired with the batch loss.  A NetworkModel input whose BN layers start
    from the stored affine gets its running statistics folded back in after
    the step.
    """
    as_model = isinstance(state, NetworkModel)
    if as_model:
        state = TrainState.from_model(state)
    model = state.model
    lr = config.learning_rate if lr is None else lr
    if config.projection is None:
        used = list(model.weights)
    else:
        used = [None if w is None else
                project_weights(w, config.projection, rng.derive("layer", i)).astype(np.float64)
                for i, w in enumerate(model.weights)]
    loss, dW, db, ds, caches = loss_and_grads(model, used, batch.features, batch.labels,
                                              config.ste_window, state.bn)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss} (lr={lr}, batch of {len(batch)})")

    weights = [None if w is None else np.clip(w - lr * dW[i], -1.0, 1.0)
               for i, w in enumerate(model.weights)]
    biases, scales, bn = list(model.biases), list(model.scales), list(state.bn)
    for i, layer in enumerate(model.layers):
        if bn[i] is not None:
            _, _, _, mu, var = caches[i]
            old = bn[i]
            bn[i] = BatchNormState(old.gamma - lr * ds[i], old.beta - lr * db[i],
                                   (1 - BN_MOMENTUM) * old.mean + BN_MOMENTUM * mu,
                                   (1 - BN_MOMENTUM) * old.var + BN_MOMENTUM * var)
        elif biases[i] is not None:
            biases[i] = biases[i] - lr * db[i]
            if scales[i] is not None:
                scales[i] = scales[i] - lr * ds[i]
    new = TrainState(model.replace_params(weights, biases, scales), tuple(bn))
    return (new.to_model() if as_model else new), loss


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_error: float
    selected: bool = False


@dataclass
class TrainResult:
    model: NetworkModel
    log: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_val_error(self) -> float:
        return self.log[self.best_epoch].val_error

    CSV_COLUMNS = ("epoch", "train_loss", "val_error", "selected_flag")

    def rows(self):
        return [(r.epoch, r.train_loss, r.val_error, int(r.selected)) for r in self.log]


def validation_error(model: NetworkModel, val: Dataset, config: TrainConfig, epoch: int) -> float:
    """Single projection with a fixed per-epoch seed (or the real weights)."""
    if config.projection is None:
        return error_rate(model, val)
    inst = project(model, config.projection, RandomSource(config.seed).derive("val", epoch))
    return error_rate(inst, val)


def train_and_select(model: NetworkModel, train: Dataset, val: Dataset,
                     config: TrainConfig) -> TrainResult:
    """Run ``config.epochs`` epochs and return the snapshot with the lowest
    validation error (epoch 0 is the initial model; earliest wins ties)."""
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation splits must be non-empty")
    root = RandomSource(config.seed)
    log = [EpochRecord(0, float("nan"), validation_error(model, val, config, 0))]
    best_model, best_epoch = model, 0
    state = TrainState.from_model(model)
    n = len(train)
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        perm = root.derive("shuffle", epoch).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            state, loss = projected_sgd_step(state, train.subset(idx), config,
                                             root.derive("step", epoch, b), lr)
            total += loss * len(idx)
        snapshot = state.to_model()
        val_err = validation_error(snapshot, val, config, epoch)
        log.append(EpochRecord(epoch, total / n, val_err))
        if val_err < log[best_epoch].val_error:
            best_model, best_epoch = snapshot, epoch
    log[best_epoch] = EpochRecord(best_epoch, log[best_epoch].train_loss,
                                  log[best_epoch].val_error, True)
    return TrainResult(best_model, log, best_epoch)
