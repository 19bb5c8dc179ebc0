"""Small fixed-architecture CNN with a tapped convolutional layer.

The network produces class logits ``S_c`` and records the activation of the
tap layer. ``grad_score_wrt_tap`` back-propagates one logit to the tap by hand,
layer by layer, using the intermediates cached in the forward trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import tensor as T
from .rng import SplitMix64

DR_GRADES = ("no_dr", "mild", "moderate", "severe", "proliferative")
INPUT_MEAN = 0.5


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kh: int = 3
    kw: int = 3
    stride: int = 1
    pad: int = 1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool2:
    pass


@dataclass(frozen=True)
class GAP:
    pass


@dataclass(frozen=True)
class Linear:
    out_features: int


Layer = Union[Conv, ReLU, MaxPool2, GAP, Linear]


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    tap_layer: int
    num_classes: int = 5
    input_shape: tuple = (3, 64, 64)

    def __post_init__(self):
        if not 0 <= self.tap_layer < len(self.layers) or not isinstance(self.layers[self.tap_layer], Conv):
            raise NetworkError(f"tap_layer {self.tap_layer} does not index a conv layer")
        last = self.layers[-1]
        if not isinstance(last, Linear) or last.out_features != self.num_classes:
            raise NetworkError(f"final layer must be Linear({self.num_classes}), got {last}")


def default_spec() -> NetworkSpec:
    """conv8-relu-pool-conv16[tap]-relu-pool-gap-linear5 on 3x64x64."""
    return NetworkSpec(
        layers=(Conv(8), ReLU(), MaxPool2(), Conv(16), ReLU(), MaxPool2(), GAP(), Linear(5)),
        tap_layer=3,
        num_classes=5,
        input_shape=(3, 64, 64),
    )


def weight_names(index: int) -> tuple[str, str]:
    return f"layers.{index}.weight", f"layers.{index}.bias"


def shape_check(spec: NetworkSpec, input_c: int, input_h: int, input_w: int) -> list[tuple]:
    """Output shape of every layer for a [C, H, W] input.

    Raises NetworkError naming the first layer that cannot accept its input.
    """
    shape: tuple = (input_c, input_h, input_w)
    table = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            if len(shape) != 3:
                raise NetworkError(f"layer {i} (conv) expects [C,H,W], got {shape}")
            c, h, w = shape
            ho = T.conv_output_size(h, layer.kh, layer.stride, layer.pad)
            wo = T.conv_output_size(w, layer.kw, layer.stride, layer.pad)
            if ho < 1 or wo < 1:
                raise NetworkError(f"layer {i} (conv {layer.kh}x{layer.kw}) does not fit input {shape}")
            shape = (layer.out_channels, ho, wo)
        elif isinstance(layer, MaxPool2):
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise NetworkError(f"layer {i} (maxpool2) expects even H, W, got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif isinstance(layer, GAP):
            if len(shape) != 3:
                raise NetworkError(f"layer {i} (gap) expects [C,H,W], got {shape}")
            shape = (shape[0],)
        elif isinstance(layer, Linear):
            shape = (layer.out_features,)
        elif not isinstance(layer, ReLU):
            raise NetworkError(f"layer {i}: unknown layer type {layer!r}")
        table.append(shape)
    return table


def parameter_shapes(spec: NetworkSpec, input_shape=None) -> dict[str, tuple]:
    c, h, w = input_shape or spec.input_shape
    shapes = {}
    prev = (c, h, w)
    for i, (layer, out) in enumerate(zip(spec.layers, shape_check(spec, c, h, w))):
        wn, bn = weight_names(i)
        if isinstance(layer, Conv):
            shapes[wn] = (layer.out_channels, prev[0], layer.kh, layer.kw)
            shapes[bn] = (layer.out_channels,)
        elif isinstance(layer, Linear):
            shapes[wn] = (layer.out_features, int(np.prod(prev)))
            shapes[bn] = (layer.out_features,)
        prev = out
    return shapes


def init_weights(spec: NetworkSpec, seed: int = 0, scale: float = 0.1) -> dict[str, np.ndarray]:
    """Uniform[-scale, scale] weights drawn in layer order from SplitMix64."""
    rng = SplitMix64(seed)
    weights = {}
    for name, shape in parameter_shapes(spec).items():
        n = int(np.prod(shape))
        weights[name] = rng.uniform(n, -scale, scale).astype(np.float32).reshape(shape)
    return weights


def check_weights(spec: NetworkSpec, weights: dict, input_shape=None) -> None:
    for name, shape in parameter_shapes(spec, input_shape).items():
        if name not in weights:
            raise NetworkError(f"missing weight {name!r}")
        if tuple(weights[name].shape) != shape:
            raise NetworkError(f"weight {name!r} has shape {tuple(weights[name].shape)}, expected {shape}")


@dataclass
class ForwardTrace:
    logits: np.ndarray
    tap_activation: np.ndarray
    inputs: list = field(default_factory=list)  # input of every layer
    pool_argmax: dict = field(default_factory=dict)
    input_shape: tuple = ()


def _apply(layer, i, x, weights, trace=None):
    if isinstance(layer, Conv):
        wn, bn = weight_names(i)
        return T.conv2d(x, weights[wn], weights[bn], layer.stride, layer.pad)
    if isinstance(layer, ReLU):
        return T.relu(x)
    if isinstance(layer, MaxPool2):
        out, arg = T.maxpool2d_with_argmax(x)
        if trace is not None:
            trace.pool_argmax[i] = arg
        return out
    if isinstance(layer, GAP):
        return T.global_avg_pool(x)
    wn, bn = weight_names(i)
    return T.linear(x, weights[wn], weights[bn])


def run_layers(spec: NetworkSpec, weights, x, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Apply layers ``start .. stop-1`` to ``x`` without recording a trace."""
    stop = len(spec.layers) if stop is None else stop
    for i in range(start, stop):
        x = _apply(spec.layers[i], i, x, weights)
    return x


def forward(spec: NetworkSpec, weights, image) -> ForwardTrace:
    image = T.as_tensor(image)
    shape_check(spec, *image.shape)
    check_weights(spec, weights, image.shape)
    trace = ForwardTrace(logits=None, tap_activation=None, input_shape=tuple(image.shape))
    x = image
    for i, layer in enumerate(spec.layers):
        trace.inputs.append(x)
        x = _apply(layer, i, x, weights, trace)
        if i == spec.tap_layer:
            trace.tap_activation = x
    trace.logits = x
    return trace


def grad_score_wrt_tap(spec: NetworkSpec, weights, trace: ForwardTrace, class_index: int) -> np.ndarray:
    """Exact dS_c/dA for the tap activation A, by reverse-mode chain rule."""
    if not 0 <= class_index < spec.num_classes:
        raise NetworkError(f"class index {class_index} out of range [0, {spec.num_classes})")
    expected = shape_check(spec, *trace.input_shape)
    if len(trace.inputs) != len(spec.layers) or tuple(trace.tap_activation.shape) != expected[spec.tap_layer]:
        raise NetworkError("stale trace: shapes do not match this network")
    dtype = trace.tap_activation.dtype
    grad = None
    for i in range(len(spec.layers) - 1, spec.tap_layer, -1):
        layer = spec.layers[i]
        x = trace.inputs[i]
        if isinstance(layer, Linear):
            wn, _ = weight_names(i)
            w = weights[wn].astype(np.float64)
            if grad is None:
                g = w[class_index]
            else:
                g = w.T @ grad
            grad = g.reshape(x.shape)
        elif isinstance(layer, GAP):
            _, h, w = x.shape
            grad = np.broadcast_to(grad[:, None, None] / (h * w), x.shape).copy()
        elif isinstance(layer, MaxPool2):
            grad = T.maxpool2d_backward(grad, trace.pool_argmax[i], x.shape)
        elif isinstance(layer, ReLU):
            grad = grad * (x > 0)
        elif isinstance(layer, Conv):
            wn, _ = weight_names(i)
            grad = T.conv2d_backward_input(grad, weights[wn], x.shape, layer.stride, layer.pad)
    if grad is None:
        raise NetworkError("tap layer is the final layer")
    return grad.astype(dtype)


def preprocess(image) -> np.ndarray:
    """Center a [0, 1] image before it enters the network."""
    image = T.as_tensor(image)
    return (image - np.asarray(INPUT_MEAN, dtype=image.dtype)).astype(image.dtype)


def relu_features(trace: ForwardTrace) -> np.ndarray:
    """Rectified tap activation, the feature map fed to the proposal head."""
    return np.maximum(trace.tap_activation, 0)
