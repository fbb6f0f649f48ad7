"""Layer composition, parameter state, momentum SGD and the AlexNet-shaped builder."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, PoolSpec, ShapeError

STATE_MAGIC = b"PPS1"
STATE_VERSION = 1
_STATE_HEADER = struct.Struct("<4sII")


class StateFormatError(ValueError):
    """A flattened-state buffer does not match the expected layout."""


# -- layer specs -------------------------------------------------------------

@dataclass(frozen=True)
class Conv:
    spec: ConvSpec


@dataclass(frozen=True)
class MaxPool:
    spec: PoolSpec


@dataclass(frozen=True)
class Dense:
    out_dim: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class SoftmaxXent:
    classes: int


LayerSpec = Union[Conv, MaxPool, Dense, ReLU, Flatten, SoftmaxXent]


@dataclass(frozen=True)
class NetworkSpec:
    """Input shape ``(c, h, w)`` plus an ordered layer list.

    Shapes are chained at construction; a spec that builds never fails
    with a shape error at run time.
    """
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "shapes", _chain_shapes(self.input_shape, self.layers))

    @property
    def classes(self) -> int:
        return self.layers[-1].classes

    def param_shapes(self) -> list[tuple[tuple[int, ...], tuple[int]]]:
        """(weight shape, bias shape) for every parameterized layer, in order."""
        out = []
        for layer, shape_in in zip(self.layers, self.shapes):
            if isinstance(layer, Conv):
                kh, kw = layer.spec.kernel
                o = layer.spec.out_channels
                out.append(((o, shape_in[0], kh, kw), (o,)))
            elif isinstance(layer, Dense):
                out.append(((shape_in[0], layer.out_dim), (layer.out_dim,)))
        return out


def _chain_shapes(input_shape, layers) -> tuple[tuple[int, ...], ...]:
    """Per-layer input shapes (without batch axis); the last entry is the output."""
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise ShapeError(f"input shape must be positive (c, h, w), got {input_shape}")
    if not layers or not isinstance(layers[-1], SoftmaxXent):
        raise ShapeError("network must end with exactly one SoftmaxXent layer")
    if sum(isinstance(l, SoftmaxXent) for l in layers) != 1:
        raise ShapeError("network must contain exactly one SoftmaxXent layer")

    shapes = [tuple(input_shape)]
    cur = tuple(input_shape)
    for idx, layer in enumerate(layers):
        name = f"layer {idx} ({type(layer).__name__})"
        try:
            if isinstance(layer, (Conv, MaxPool)):
                if len(cur) != 3:
                    raise ShapeError(f"expects (c, h, w) input, got {cur}")
                oh, ow = layer.spec.output_hw(cur[1], cur[2])
                c = layer.spec.out_channels if isinstance(layer, Conv) else cur[0]
                cur = (c, oh, ow)
            elif isinstance(layer, Flatten):
                cur = (int(np.prod(cur)),)
            elif isinstance(layer, Dense):
                if len(cur) != 1:
                    raise ShapeError(f"expects flat input, got {cur}; insert Flatten")
                if layer.out_dim < 1:
                    raise ShapeError("out_dim must be >= 1")
                cur = (layer.out_dim,)
            elif isinstance(layer, SoftmaxXent):
                if cur != (layer.classes,):
                    raise ShapeError(f"expects logits of shape ({layer.classes},), got {cur}")
            elif not isinstance(layer, ReLU):
                raise ShapeError(f"unknown layer type {layer!r}")
        except ShapeError as exc:
            raise ShapeError(f"{name}: {exc}") from None
        shapes.append(cur)
    return tuple(shapes)


BASE_CHANNELS = (64, 128, 192, 192, 128)
BASE_HIDDEN = 1024


def build_alexnet_scaled(input_shape: tuple[int, int, int], classes: int,
                         width_scale: float = 0.125) -> NetworkSpec:
    """Five convolutions (pooling after the 1st, 2nd and 5th), two dense layers, softmax.

    At the default ``width_scale`` the conv widths are (8, 16, 24, 24, 16)
    and the hidden dense layer has 128 units. Each pool halves the spatial
    extent, so ``h`` and ``w`` must be divisible by 8.
    """
    chans = [int(round(c * width_scale)) for c in BASE_CHANNELS]
    hidden = int(round(BASE_HIDDEN * width_scale))
    if min(chans) < 1 or hidden < 1:
        raise ValueError(f"width_scale {width_scale} leaves a layer with no units")
    pool = MaxPool(PoolSpec((2, 2), 2))
    layers: list[LayerSpec] = [
        Conv(ConvSpec(chans[0], (3, 3), 1, 1)), ReLU(), pool,
        Conv(ConvSpec(chans[1], (3, 3), 1, 1)), ReLU(), pool,
        Conv(ConvSpec(chans[2], (3, 3), 1, 1)), ReLU(),
        Conv(ConvSpec(chans[3], (3, 3), 1, 1)), ReLU(),
        Conv(ConvSpec(chans[4], (3, 3), 1, 1)), ReLU(), pool,
        Flatten(),
        Dense(hidden), ReLU(),
        Dense(classes),
        SoftmaxXent(classes),
    ]
    return NetworkSpec(tuple(input_shape), tuple(layers))


# -- parameters --------------------------------------------------------------

@dataclass
class LayerParams:
    weights: np.ndarray
    bias: np.ndarray
    weights_momentum: np.ndarray
    bias_momentum: np.ndarray

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return (self.weights, self.bias, self.weights_momentum, self.bias_momentum)


@dataclass
class ParamState:
    """Weights, biases and momentum buffers of every parameterized layer."""
    layers: list[LayerParams]

    def arrays(self) -> list[np.ndarray]:
        return [a for lp in self.layers for a in lp.arrays()]

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "ParamState":
        return ParamState([LayerParams(*(a.copy() for a in lp.arrays())) for lp in self.layers])


@dataclass(frozen=True)
class Hyper:
    learning_rate: float = 0.001
    momentum: float = 0.9

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def init_params(spec: NetworkSpec, seed: int, std: float | None = None) -> ParamState:
    """Gaussian weights, zero biases and zero momentum, from a generator seeded by ``seed``.

    With ``std=None`` hidden layers use ``sqrt(2 / fan_in)`` and the logit
    layer a tenth of that, so the initial softmax is close to uniform. A
    float uses that fixed deviation everywhere (0.01 is the classic AlexNet
    value, which stalls at this depth without bias tricks).
    """
    rng = np.random.default_rng(seed)
    shapes = spec.param_shapes()
    layers = []
    for i, (w_shape, b_shape) in enumerate(shapes):
        if std is None:
            fan_in = int(np.prod(w_shape[1:])) if len(w_shape) == 4 else w_shape[0]
            scale = np.sqrt(2.0 / fan_in) * (0.1 if i == len(shapes) - 1 else 1.0)
        else:
            scale = std
        w = (rng.standard_normal(w_shape) * scale).astype(T.DTYPE)
        b = np.zeros(b_shape, dtype=T.DTYPE)
        layers.append(LayerParams(w, b, np.zeros_like(w), np.zeros_like(b)))
    return ParamState(layers)


# -- forward / backward ------------------------------------------------------

def forward_backward(spec: NetworkSpec, params: ParamState, images: np.ndarray,
                     labels: np.ndarray):
    """Loss, accuracy and per-layer ``(grad_weights, grad_bias)`` for one minibatch."""
    if images.ndim != 4 or images.shape[1:] != spec.input_shape:
        raise ShapeError(f"batch shape {images.shape} does not match network input "
                         f"(n, {', '.join(map(str, spec.input_shape))})")
    x = images
    tape = []
    p_iter = iter(params.layers)
    loss = probs = grad = None
    for layer in spec.layers:
        if isinstance(layer, Conv):
            lp = next(p_iter)
            tape.append((x, lp))
            x = T.conv2d_forward(x, lp.weights, lp.bias, layer.spec)
        elif isinstance(layer, Dense):
            lp = next(p_iter)
            tape.append((x, lp))
            x = T.dense_forward(x, lp.weights, lp.bias)
        elif isinstance(layer, ReLU):
            tape.append(x)
            x = T.relu(x)
        elif isinstance(layer, MaxPool):
            out, argmax = T.maxpool_forward(x, layer.spec)
            tape.append((x.shape, argmax))
            x = out
        elif isinstance(layer, Flatten):
            tape.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, SoftmaxXent):
            loss, probs, grad = T.softmax_xent(x, labels)
            tape.append(None)

    accuracy = float(np.mean(probs.argmax(axis=1) == labels))
    grads = []
    for layer, saved in zip(reversed(spec.layers), reversed(tape)):
        if isinstance(layer, Conv):
            x_in, lp = saved
            grad, gw, gb = T.conv2d_backward(x_in, lp.weights, grad, layer.spec)
            grads.append((gw, gb))
        elif isinstance(layer, Dense):
            x_in, lp = saved
            grad, gw, gb = T.dense_backward(x_in, lp.weights, grad)
            grads.append((gw, gb))
        elif isinstance(layer, ReLU):
            grad = T.relu_backward(saved, grad)
        elif isinstance(layer, MaxPool):
            shape, argmax = saved
            grad = T.maxpool_backward(grad, argmax, shape)
        elif isinstance(layer, Flatten):
            grad = grad.reshape(saved)
    grads.reverse()
    return loss, accuracy, grads


def predict(spec: NetworkSpec, params: ParamState, images: np.ndarray) -> np.ndarray:
    """Logits for ``images``; forward pass only."""
    x = images
    p_iter = iter(params.layers)
    for layer in spec.layers:
        if isinstance(layer, Conv):
            lp = next(p_iter)
            x = T.conv2d_forward(x, lp.weights, lp.bias, layer.spec)
        elif isinstance(layer, Dense):
            lp = next(p_iter)
            x = T.dense_forward(x, lp.weights, lp.bias)
        elif isinstance(layer, ReLU):
            x = T.relu(x)
        elif isinstance(layer, MaxPool):
            x = T.maxpool_forward(x, layer.spec)[0]
        elif isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], -1)
    return x


def sgd_momentum_step(params: ParamState, grads: Sequence[tuple[np.ndarray, np.ndarray]],
                      hyper: Hyper) -> None:
    """In place: ``v <- mu*v - lr*g``, then ``p <- p + v``."""
    if len(grads) != len(params.layers):
        raise ShapeError(f"{len(grads)} gradient pairs for {len(params.layers)} layers")
    mu = T.DTYPE(hyper.momentum)
    lr = T.DTYPE(hyper.learning_rate)
    for lp, (gw, gb) in zip(params.layers, grads):
        for p, v, g in ((lp.weights, lp.weights_momentum, gw), (lp.bias, lp.bias_momentum, gb)):
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            v *= mu
            v -= lr * g
            p += v


# -- flattened state ---------------------------------------------------------

def flat_vector(params: ParamState) -> np.ndarray:
    """All weights, biases and momenta concatenated into one fresh float32 vector."""
    return np.concatenate([a.ravel() for a in params.arrays()]).astype(T.DTYPE, copy=False)


def load_flat_vector(params: ParamState, vec: np.ndarray) -> None:
    """Overwrite ``params`` in place from a vector laid out by :func:`flat_vector`."""
    if vec.size != params.size:
        raise StateFormatError(f"vector holds {vec.size} values, state needs {params.size}")
    offset = 0
    for a in params.arrays():
        a.ravel()[:] = vec[offset:offset + a.size]
        offset += a.size


def flatten_state(params: ParamState) -> bytes:
    header = _STATE_HEADER.pack(STATE_MAGIC, STATE_VERSION, len(params.layers))
    return header + flat_vector(params).astype("<f4", copy=False).tobytes()


def _shapes_of(params: ParamState):
    return [(lp.weights.shape, lp.bias.shape) for lp in params.layers]


def _unflatten(buffer, shapes) -> ParamState:
    buffer = memoryview(buffer)
    if len(buffer) < _STATE_HEADER.size:
        raise StateFormatError(f"buffer length {len(buffer)} shorter than the "
                               f"{_STATE_HEADER.size}-byte header")
    magic, version, count = _STATE_HEADER.unpack_from(buffer)
    if magic != STATE_MAGIC:
        raise StateFormatError(f"bad magic {magic!r}, expected {STATE_MAGIC!r}")
    if version != STATE_VERSION:
        raise StateFormatError(f"unsupported version {version}")
    if count != len(shapes):
        raise StateFormatError(f"layer count {count} != {len(shapes)} expected")
    total = sum(2 * (int(np.prod(ws)) + int(np.prod(bs))) for ws, bs in shapes)
    expected = _STATE_HEADER.size + 4 * total
    if len(buffer) != expected:
        raise StateFormatError(f"buffer length {len(buffer)} != expected {expected}")
    values = np.frombuffer(buffer, dtype="<f4", offset=_STATE_HEADER.size)
    layers, offset = [], 0
    for ws, bs in shapes:
        arrs = []
        for shape in (ws, bs, ws, bs):
            n = int(np.prod(shape))
            arrs.append(values[offset:offset + n].astype(T.DTYPE).reshape(shape))
            offset += n
        layers.append(LayerParams(*arrs))
    return ParamState(layers)


def unflatten_state(buffer, spec: NetworkSpec) -> ParamState:
    return _unflatten(buffer, spec.param_shapes())


def unflatten_like(buffer, template: ParamState) -> ParamState:
    """Decode ``buffer`` using the layer shapes of an existing state."""
    return _unflatten(buffer, _shapes_of(template))


def states_equal(a: ParamState, b: ParamState) -> bool:
    """Bit-level equality of two states."""
    return flatten_state(a) == flatten_state(b)
