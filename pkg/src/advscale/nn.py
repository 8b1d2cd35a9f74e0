"""Minimal differentiable classifier stack on NumPy.

Layers (fixed vocabulary): input normalization (divide by 255), dense,
ReLU, 2-d convolution, max-pool, flatten.  Everything is float64; inputs
are raw pixels in [0, 255] and the first layer of every network rescales
them to [0, 1], so attack budgets and pixel values share the [0, 255]
scale.

All heavy routines are batched: an input of shape ``input_shape`` is a
single example, ``(n, *input_shape)`` is a batch.  Reverse-mode gradients
(`grad_input`, parameter gradients inside `train`), full input-logit
Jacobians (`jacobian`) and forward-mode directional derivatives
(`jvp_logits`) all share one cached forward pass.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class ArchitectureError(ValueError):
    """Raised when an architecture descriptor is not shape-consistent."""


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


# ---------------------------------------------------------------------------
# Architecture descriptors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenseSpec:
    units: int
    # optional declared fan-in; checked against the inferred one when given
    in_features: Optional[int] = None


@dataclass(frozen=True)
class ReluSpec:
    pass


@dataclass(frozen=True)
class ConvSpec:
    filters: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class MaxPoolSpec:
    pool: int = 2


@dataclass(frozen=True)
class FlattenSpec:
    pass


LayerSpec = object  # union of the *Spec dataclasses above


@dataclass(frozen=True)
class Architecture:
    """Input shape plus ordered layer descriptors; the last layer must be
    dense and its width is the class count."""

    input_shape: tuple
    layers: tuple

    @property
    def n_classes(self) -> int:
        last = self.layers[-1]
        if not isinstance(last, DenseSpec):
            raise ArchitectureError("last layer must be dense (emits the logits)")
        return last.units


def parse_arch(text: str, input_shape: Sequence[int]) -> Architecture:
    """Parse a compact architecture string, e.g. ``dense:100,relu,dense:10``
    or ``conv:8:3,relu,maxpool:2,flatten,dense:10``."""
    specs = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        parts = token.split(":")
        kind, args = parts[0], parts[1:]
        try:
            if kind == "dense":
                specs.append(DenseSpec(int(args[0])))
            elif kind == "relu":
                specs.append(ReluSpec())
            elif kind == "conv":
                stride = int(args[2]) if len(args) > 2 else 1
                specs.append(ConvSpec(int(args[0]), int(args[1]), stride))
            elif kind == "maxpool":
                specs.append(MaxPoolSpec(int(args[0]) if args else 2))
            elif kind == "flatten":
                specs.append(FlattenSpec())
            else:
                raise ArchitectureError(f"unknown layer kind {kind!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, ArchitectureError):
                raise
            raise ArchitectureError(f"bad layer token {token!r}") from exc
    return Architecture(tuple(input_shape), tuple(specs))


# ---------------------------------------------------------------------------
# Realized layers
# ---------------------------------------------------------------------------
# Protocol: forward(x) -> (y, cache); backward(g, cache) -> (dx, param_grads);
# jvp(t, cache) -> tangent of the output.  x, g, t carry a leading batch axis.

class Normalize:
    """Fixed affine rescaling of raw pixels: x / 255.  No parameters."""

    params: tuple = ()

    def forward(self, x):
        return x / 255.0, None

    def backward(self, g, cache):
        return g / 255.0, ()

    def jvp(self, t, cache):
        return t / 255.0


class Dense:
    def __init__(self, W: np.ndarray, b: np.ndarray):
        self.W = W  # (in_features, units)
        self.b = b  # (units,)

    @property
    def params(self):
        return (self.W, self.b)

    def forward(self, x):
        x2 = x.reshape(x.shape[0], -1)
        return x2 @ self.W + self.b, (x2, x.shape)

    def backward(self, g, cache):
        x2, xshape = cache
        dW = x2.T @ g
        db = g.sum(axis=0)
        dx = (g @ self.W.T).reshape(xshape)
        return dx, (dW, db)

    def jvp(self, t, cache):
        return t.reshape(t.shape[0], -1) @ self.W


class Relu:
    params: tuple = ()

    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, g, cache):
        # subgradient at exactly 0 is 0
        return g * (cache > 0.0), ()

    def jvp(self, t, cache):
        return t * (cache > 0.0)


def _as_bchw(x):
    """Insert a channel axis for (batch, H, W) inputs."""
    if x.ndim == 3:
        return x[:, None, :, :], True
    return x, False


class Conv2d:
    """Valid-padding 2-d convolution; weights (filters, in_ch, k, k)."""

    def __init__(self, W: np.ndarray, b: np.ndarray, stride: int = 1):
        self.W = W
        self.b = b
        self.stride = stride

    @property
    def params(self):
        return (self.W, self.b)

    def _apply(self, x, weights):
        s = self.stride
        _, _, kh, kw = weights.shape
        ho = (x.shape[2] - kh) // s + 1
        wo = (x.shape[3] - kw) // s + 1
        out = np.zeros((x.shape[0], weights.shape[0], ho, wo))
        for u in range(kh):
            for v in range(kw):
                xs = x[:, :, u : u + ho * s : s, v : v + wo * s : s]
                out += np.einsum("bchw,fc->bfhw", xs, weights[:, :, u, v])
        return out

    def forward(self, x):
        x4, squeezed = _as_bchw(x)
        out = self._apply(x4, self.W) + self.b[None, :, None, None]
        return out, (x4, squeezed)

    def backward(self, g, cache):
        x4, squeezed = cache
        s = self.stride
        _, _, kh, kw = self.W.shape
        ho, wo = g.shape[2], g.shape[3]
        dW = np.zeros_like(self.W)
        dx = np.zeros_like(x4)
        for u in range(kh):
            for v in range(kw):
                xs = x4[:, :, u : u + ho * s : s, v : v + wo * s : s]
                dW[:, :, u, v] = np.einsum("bfhw,bchw->fc", g, xs)
                dx[:, :, u : u + ho * s : s, v : v + wo * s : s] += np.einsum(
                    "bfhw,fc->bchw", g, self.W[:, :, u, v]
                )
        db = g.sum(axis=(0, 2, 3))
        if squeezed:
            dx = dx[:, 0]
        return dx, (dW, db)

    def jvp(self, t, cache):
        t4, _ = _as_bchw(t)
        return self._apply(t4, self.W)


class MaxPool:
    """Non-overlapping max pooling (stride == pool size)."""

    params: tuple = ()

    def __init__(self, pool: int):
        self.pool = pool

    def _windows(self, x):
        b, c, h, w = x.shape
        p = self.pool
        xr = x.reshape(b, c, h // p, p, w // p, p)
        return xr.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // p, w // p, p * p)

    def forward(self, x):
        x4, squeezed = _as_bchw(x)
        win = self._windows(x4)
        idx = np.argmax(win, axis=-1)  # ties route to the first maximum
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x4.shape, squeezed)

    def backward(self, g, cache):
        idx, xshape, squeezed = cache
        b, c, h, w = xshape
        p = self.pool
        win = np.zeros((b, c, h // p, w // p, p * p))
        np.put_along_axis(win, idx[..., None], g[..., None], axis=-1)
        dx = (
            win.reshape(b, c, h // p, w // p, p, p)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(xshape)
        )
        if squeezed:
            dx = dx[:, 0]
        return dx, ()

    def jvp(self, t, cache):
        idx, _, _ = cache
        t4, _ = _as_bchw(t)
        win = self._windows(t4)
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]


class Flatten:
    params: tuple = ()

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, g, cache):
        return g.reshape(cache), ()

    def jvp(self, t, cache):
        return t.reshape(t.shape[0], -1)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

@dataclass
class Network:
    """Ordered layer stack; layers[0] is always the fixed normalization.

    Treat a trained Network as immutable: `train` works on a private copy
    and evaluation never mutates parameters, so instances are safe to share
    across threads for read-only use.
    """

    input_shape: tuple
    n_classes: int
    layers: list = field(default_factory=list)
    arch: Optional[Architecture] = None

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def param_count(self) -> int:
        return sum(p.size for lay in self.layers for p in lay.params)


def _infer_shapes(arch: Architecture):
    """Walk the descriptor chain and return per-layer output shapes."""
    shape = tuple(arch.input_shape)
    shapes = []
    for spec in arch.layers:
        if isinstance(spec, DenseSpec):
            fan_in = int(np.prod(shape))
            if spec.in_features is not None and spec.in_features != fan_in:
                raise ArchitectureError(
                    f"dense layer declares {spec.in_features} inputs but "
                    f"receives {fan_in} (upstream shape {shape})"
                )
            shape = (spec.units,)
        elif isinstance(spec, ReluSpec):
            pass
        elif isinstance(spec, ConvSpec):
            if len(shape) == 2:
                shape = (1,) + shape
            if len(shape) != 3:
                raise ArchitectureError(f"conv needs (C,H,W) input, got {shape}")
            c, h, w = shape
            if h < spec.kernel or w < spec.kernel:
                raise ArchitectureError(
                    f"conv kernel {spec.kernel} larger than input {shape}"
                )
            ho = (h - spec.kernel) // spec.stride + 1
            wo = (w - spec.kernel) // spec.stride + 1
            shape = (spec.filters, ho, wo)
        elif isinstance(spec, MaxPoolSpec):
            if len(shape) == 2:
                shape = (1,) + shape
            if len(shape) != 3:
                raise ArchitectureError(f"maxpool needs (C,H,W) input, got {shape}")
            c, h, w = shape
            if h % spec.pool or w % spec.pool:
                raise ArchitectureError(
                    f"maxpool {spec.pool} does not divide input {shape}"
                )
            shape = (c, h // spec.pool, w // spec.pool)
        elif isinstance(spec, FlattenSpec):
            shape = (int(np.prod(shape)),)
        else:
            raise ArchitectureError(f"unknown layer spec {spec!r}")
        shapes.append(shape)
    return shapes


def init_network(arch: Architecture, seed: int) -> Network:
    """Build a network with Gaussian weights (std 1/sqrt(fan-in)), zero
    biases.  The same seed yields bit-identical parameters."""
    shapes = _infer_shapes(arch)
    n_classes = arch.n_classes
    if shapes[-1] != (n_classes,):
        raise ArchitectureError(
            f"network emits shape {shapes[-1]}, expected ({n_classes},) logits"
        )
    rng = np.random.default_rng(seed)
    layers = [Normalize()]
    shape = tuple(arch.input_shape)
    for spec, out_shape in zip(arch.layers, shapes):
        if isinstance(spec, DenseSpec):
            fan_in = int(np.prod(shape))
            W = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, spec.units))
            layers.append(Dense(W, np.zeros(spec.units)))
        elif isinstance(spec, ReluSpec):
            layers.append(Relu())
        elif isinstance(spec, ConvSpec):
            c = shape[0] if len(shape) == 3 else 1
            fan_in = c * spec.kernel * spec.kernel
            W = rng.normal(
                0.0,
                1.0 / np.sqrt(fan_in),
                size=(spec.filters, c, spec.kernel, spec.kernel),
            )
            layers.append(Conv2d(W, np.zeros(spec.filters), spec.stride))
        elif isinstance(spec, MaxPoolSpec):
            layers.append(MaxPool(spec.pool))
        elif isinstance(spec, FlattenSpec):
            layers.append(Flatten())
        shape = out_shape
    return Network(tuple(arch.input_shape), n_classes, layers, arch)


# ---------------------------------------------------------------------------
# Forward / loss / gradients
# ---------------------------------------------------------------------------

def _as_batch(net: Network, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == tuple(net.input_shape):
        return x[None], True
    if x.shape[1:] == tuple(net.input_shape):
        return x, False
    raise ValueError(
        f"input shape {x.shape} incompatible with network input {net.input_shape}"
    )


def _forward(net: Network, x: np.ndarray, masks=None):
    """Batched forward pass returning logits and per-layer caches."""
    caches = []
    h = x
    for i, layer in enumerate(net.layers):
        h, cache = layer.forward(h)
        mask = masks.get(i) if masks else None
        if mask is not None:
            h = h * mask
        caches.append((cache, mask))
    return h, caches


def _backward(net: Network, caches, dlogits, want_params=False):
    """Batched reverse pass.  Returns (d_input, param_grads) where
    param_grads is a per-layer list (empty tuples for parameterless
    layers) or None when not requested."""
    g = dlogits
    param_grads = [None] * len(net.layers) if want_params else None
    for i in range(len(net.layers) - 1, -1, -1):
        cache, mask = caches[i]
        if mask is not None:
            g = g * mask
        g, pg = net.layers[i].backward(g, cache)
        if want_params:
            param_grads[i] = pg
    return g, param_grads


def _jvp(net: Network, caches, tangent):
    """Forward-mode pass: directional derivative of the logits along
    `tangent` (raw-pixel space), linearized at the cached forward point."""
    t = tangent
    for layer, (cache, mask) in zip(net.layers, caches):
        t = layer.jvp(t, cache)
        if mask is not None:
            t = t * mask
    return t


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Pre-softmax logits; accepts one example or a batch."""
    xb, single = _as_batch(net, x)
    logits, _ = _forward(net, xb)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits in forward pass")
    return logits[0] if single else logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(net: Network, x: np.ndarray) -> np.ndarray:
    logits = forward(net, x)
    return np.argmax(logits, axis=-1)


def accuracy(net: Network, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict(net, x) == np.asarray(y)))


@dataclass(frozen=True)
class LossSpec:
    """Cross-entropy with an optional confidence-sharpening penalty:
    loss = CE + entropy_lambda * H(softmax).  entropy_lambda=0 disables it."""

    entropy_lambda: float = 0.0

    def __post_init__(self):
        if self.entropy_lambda < 0:
            raise ValueError("entropy_lambda must be >= 0")


def _entropy(p: np.ndarray) -> np.ndarray:
    plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return -plogp.sum(axis=-1)


def ce_delta(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Cross-entropy logit error p - onehot(y), with the true-class entry
    computed as minus the sum of the other probabilities so it keeps its
    sign even when p_y rounds to 1 (saturated examples)."""
    y = np.asarray(y)
    n = len(p)
    rows = np.arange(n)
    others = p.copy()
    others[rows, y] = 0.0
    delta = p.copy()
    delta[rows, y] = -others.sum(axis=1)
    return delta


def _loss_terms(logits: np.ndarray, y: np.ndarray, spec: LossSpec):
    """Per-example loss values and d(loss)/d(logits)."""
    y = np.asarray(y)
    n = logits.shape[0]
    # stable cross-entropy: logsumexp(h) - h_y
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    ce = lse - logits[np.arange(n), y]
    p = softmax(logits)
    delta = ce_delta(p, y)
    lam = spec.entropy_lambda
    if lam != 0.0:
        h = _entropy(p)
        values = ce + lam * h
        logp = np.log(np.where(p > 0.0, p, 1.0))
        delta = delta - lam * p * (logp + h[:, None])
    else:
        values = ce
    return values, delta


def loss(net: Network, x: np.ndarray, y, spec: LossSpec = LossSpec()) -> float:
    """Training loss of a single example (class index y)."""
    xb, single = _as_batch(net, x)
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if np.any((yb < 0) | (yb >= net.n_classes)):
        raise ValueError(f"label out of range [0, {net.n_classes})")
    logits, _ = _forward(net, xb)
    values, _ = _loss_terms(logits, yb, spec)
    return float(values[0]) if single else values


def grad_input(net: Network, x: np.ndarray, y, spec: LossSpec = LossSpec()) -> np.ndarray:
    """Gradient of the loss with respect to the raw-pixel input.

    Flows through the fixed normalization, so the result lives on the
    [0, 255] pixel scale.  Batched when x carries a leading batch axis;
    each row is the gradient of that example's own loss.
    """
    xb, single = _as_batch(net, x)
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    logits, caches = _forward(net, xb)
    _, delta = _loss_terms(logits, yb, spec)
    dx, _ = _backward(net, caches, delta)
    if not np.all(np.isfinite(dx)):
        raise FloatingPointError("non-finite input gradient")
    return dx[0] if single else dx


def jacobian(net: Network, x: np.ndarray) -> np.ndarray:
    """Full input-logit Jacobian J of one example, shape (n_inputs, N)
    with J[a, b] = d logit_b / d pixel_a (raw-pixel space).

    Implemented as one reverse pass over an N-row batch of copies of x,
    seeded with the identity on the logit side.
    """
    xb, single = _as_batch(net, x)
    if not single:
        raise ValueError("jacobian expects a single example")
    n = net.n_classes
    xrep = np.repeat(xb, n, axis=0)
    _, caches = _forward(net, xrep)
    dx, _ = _backward(net, caches, np.eye(n))
    return dx.reshape(n, -1).T


def jvp_logits(net: Network, x: np.ndarray, tangent: np.ndarray) -> np.ndarray:
    """Directional derivative of the logits along `tangent`: J^T t.

    Batched: x (n, *input_shape) with matching tangents gives (n, N).
    """
    xb, single = _as_batch(net, x)
    tb = np.asarray(tangent, dtype=np.float64)
    tb = tb[None] if single else tb
    _, caches = _forward(net, xb)
    out = _jvp(net, caches, tb)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdvMix:
    """Replace `fraction` of each batch with attacked versions crafted
    against the current (mid-training) parameters."""

    spec: object  # attacks.AttackSpec
    fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("adversarial mixing fraction must be in [0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    epochs: int
    batch_size: int = 32
    momentum: float = 0.0
    seed: int = 0
    adv_mix: Optional[AdvMix] = None
    dropout: float = 0.0  # single rate, hidden dense activations only
    stop_at_train_acc: Optional[float] = None


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    mean_loss: float
    train_accuracy: float


@dataclass
class TrainResult:
    net: Network
    history: list


def _hidden_dense_indices(net: Network):
    dense_idx = [i for i, lay in enumerate(net.layers) if isinstance(lay, Dense)]
    return dense_idx[:-1]


def train(net: Network, data, cfg: TrainConfig, spec: LossSpec = LossSpec()) -> TrainResult:
    """SGD with optional momentum, dropout and adversarial mixing.

    Deterministic given (net, data, cfg): the config seed drives batch
    order, dropout masks and any attack randomness.  Raises
    TrainingDivergedError if the loss goes non-finite.
    """
    if len(data.inputs) == 0:
        raise ValueError("training data is empty")
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    velocities = [[np.zeros_like(p) for p in lay.params] for lay in net.layers]
    drop_layers = _hidden_dense_indices(net) if cfg.dropout > 0 else []
    x_all = np.asarray(data.inputs, dtype=np.float64)
    y_all = np.asarray(data.labels, dtype=np.int64)
    n = len(x_all)
    history = []
    if cfg.adv_mix is not None:
        from . import attacks  # deferred: attacks imports this module

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = x_all[idx]
            yb = y_all[idx]
            if cfg.adv_mix is not None:
                k = int(round(cfg.adv_mix.fraction * len(idx)))
                if k > 0:
                    adv = attacks.apply_attack(
                        net, xb[:k], yb[:k], cfg.adv_mix.spec, rng=rng
                    )
                    xb = np.concatenate([adv, xb[k:]], axis=0)
            masks = None
            if drop_layers:
                masks = {}
                keep = 1.0 - cfg.dropout
                for li in drop_layers:
                    units = net.layers[li].W.shape[1]
                    masks[li] = (
                        rng.random((len(idx), units)) < keep
                    ).astype(np.float64) / keep
            logits, caches = _forward(net, xb, masks)
            values, delta = _loss_terms(logits, yb, spec)
            batch_loss = float(values.mean())
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch offset {start} "
                    f"(lr={cfg.lr}); lower the learning rate"
                )
            losses.append(batch_loss)
            _, pgrads = _backward(net, caches, delta / len(idx), want_params=True)
            for li, layer in enumerate(net.layers):
                for p, v, g in zip(layer.params, velocities[li], pgrads[li]):
                    if cfg.momentum != 0.0:
                        v *= cfg.momentum
                        v += g
                        p -= cfg.lr * v
                    else:
                        p -= cfg.lr * g
        try:
            acc = accuracy(net, x_all, y_all)
        except FloatingPointError as exc:
            raise TrainingDivergedError(
                f"non-finite activations after epoch {epoch} (lr={cfg.lr}); "
                f"lower the learning rate"
            ) from exc
        history.append(EpochMetrics(epoch, float(np.mean(losses)), acc))
        if cfg.stop_at_train_acc is not None and acc >= cfg.stop_at_train_acc:
            break
    return TrainResult(net, history)
