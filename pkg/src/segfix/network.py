"""Sequential layer chains: forward with activation recording, reverse-mode gradients."""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor import (
    ConvParams,
    FCParams,
    PoolParams,
    as_tensor,
    conv2d,
    fully_connected,
    pool,
    pool_counts,
    relu,
)

LAYER_KINDS = ("conv", "pool", "relu", "fc")
_NAME_RE = re.compile(r"[A-Za-z0-9_.\-]+")
_PARAM_TYPES = {"conv": ConvParams, "pool": PoolParams, "fc": FCParams, "relu": type(None)}


@dataclass(eq=False)
class LayerSpec:
    kind: str
    name: str
    params: ConvParams | PoolParams | FCParams | None = None

    def __post_init__(self):
        if not _NAME_RE.fullmatch(self.name):
            raise ValidationError(f"invalid layer name {self.name!r}")
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        if not isinstance(self.params, _PARAM_TYPES[self.kind]):
            raise ValidationError(
                f"layer {self.name!r}: kind {self.kind} cannot take {type(self.params).__name__}"
            )

    @property
    def trainable(self) -> bool:
        return self.kind in ("conv", "fc")


@dataclass(eq=False)
class Network:
    """An ordered chain of layers ending in a 1x1 conv scorer.

    Weights live inside the layer params. ``in_channels`` is the channel count
    the first layer expects.
    """

    layers: list[LayerSpec]
    in_channels: int

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.layers:
            raise ValidationError("network has no layers")
        names = [layer.name for layer in self.layers]
        for name in names:
            if names.count(name) > 1:
                raise ValidationError(f"duplicate layer name {name!r}")
        channels = self.in_channels
        for layer in self.layers:
            p = layer.params
            if layer.kind == "conv":
                if p.in_channels != channels:
                    raise ValidationError(
                        f"layer {layer.name!r}: expects {p.in_channels} input channels, "
                        f"previous layer gives {channels}"
                    )
                channels = p.out_channels
            elif layer.kind == "fc":
                channels = p.weight.shape[0]
        last = self.layers[-1]
        if last.kind != "conv" or last.params.kernel_size != (1, 1):
            raise ValidationError(
                f"final layer {last.name!r} must be a conv layer with a 1x1 kernel"
            )

    @property
    def num_classes(self) -> int:
        return self.layers[-1].params.out_channels

    def index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(f"unknown layer name {name!r}")

    def trainable_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.trainable]

    def copy(self) -> "Network":
        return copy.deepcopy(self)


@dataclass(eq=False)
class ActivationRecord:
    """Every intermediate output of one forward pass.

    ``level(0)`` is the input image and ``level(i)`` the output of layer ``i - 1``,
    so the score tensor is ``level(len(layers))``.
    """

    image: np.ndarray
    outputs: list[np.ndarray]
    argmax: dict[int, np.ndarray] = field(default_factory=dict)

    def level(self, i: int) -> np.ndarray:
        return self.image if i == 0 else self.outputs[i - 1]

    @property
    def scores(self) -> np.ndarray:
        return self.outputs[-1]

    @property
    def depth(self) -> int:
        return len(self.outputs)


def apply_layer(layer: LayerSpec, x: np.ndarray):
    """Run one layer; returns ``(output, argmax_or_None)``."""
    if layer.kind == "conv":
        return conv2d(x, layer.params), None
    if layer.kind == "pool":
        return pool(x, layer.params)
    if layer.kind == "relu":
        return relu(x), None
    p = layer.params
    return fully_connected(x, p.weight, p.bias).reshape(-1, 1, 1), None


def layer_output_shape(layer: LayerSpec, in_shape) -> tuple[int, int, int]:
    if layer.params is None:
        return tuple(in_shape)
    return layer.params.output_shape(in_shape)


def forward(net: Network, image) -> ActivationRecord:
    x = as_tensor(image)
    if x.shape[0] != net.in_channels:
        raise ShapeError(
            f"image has {x.shape[0]} channels, network {net.layers[0].name!r} expects {net.in_channels}"
        )
    record = ActivationRecord(image=x, outputs=[])
    for i, layer in enumerate(net.layers):
        try:
            x, arg = apply_layer(layer, x)
        except ShapeError as exc:
            raise ShapeError(f"layer {layer.name!r}: {exc}") from exc
        record.outputs.append(x)
        if arg is not None:
            record.argmax[i] = arg
    return record


def predict_segmentation(record_or_scores) -> np.ndarray:
    """Per-pixel argmax over channels of the score tensor; ties go to the lowest channel."""
    scores = getattr(record_or_scores, "scores", record_or_scores)
    return np.argmax(np.asarray(scores), axis=0).astype(np.int64)


def upsample_nearest(labels: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    labels = np.asarray(labels)
    h, w = labels.shape
    if target_h < h or target_w < w:
        raise ValueError(f"cannot upsample {h}x{w} to smaller {target_h}x{target_w}")
    rows = np.arange(target_h) * h // target_h
    cols = np.arange(target_w) * w // target_w
    return labels[rows[:, None], cols[None, :]]


def downsample_nearest(labels: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Sample a label map at the centers of a coarser grid."""
    labels = np.asarray(labels)
    h, w = labels.shape
    rows = np.minimum((2 * np.arange(target_h) + 1) * h // (2 * target_h), h - 1)
    cols = np.minimum((2 * np.arange(target_w) + 1) * w // (2 * target_w), w - 1)
    return labels[rows[:, None], cols[None, :]]


def center_tap(params, row: int, col: int, in_shape) -> tuple[int, int]:
    """Input position under the central tap of a conv kernel or pool window.

    For even sizes the lower-right of the two central taps is used. The result
    is clamped into the input so heavily padded layers still map inside it.
    """
    _, h, w = in_shape
    if isinstance(params, ConvParams):
        kh, kw = params.kernel_size
        d = params.dilation
    elif isinstance(params, PoolParams):
        kh = kw = params.window
        d = 1
    else:
        return row, col
    r = row * params.stride - params.pad + (kh // 2) * d
    c = col * params.stride - params.pad + (kw // 2) * d
    return min(max(r, 0), h - 1), min(max(c, 0), w - 1)


def map_center(net: Network, record: ActivationRecord, level: int, row: int, col: int):
    """Follow central taps from a unit at ``level`` down to the image plane."""
    for i in range(level - 1, -1, -1):
        layer = net.layers[i]
        if layer.kind == "fc":
            raise ValueError("fully connected layers have no spatial center")
        row, col = center_tap(layer.params, row, col, record.level(i).shape)
    return row, col


@dataclass(eq=False)
class Gradients:
    """Result of :func:`backward`.

    ``params`` maps layer name to ``(weight_grad, bias_grad)`` for every conv/fc
    layer between the cut and the highest injected gradient. ``input_grad`` is
    the gradient with respect to the input of the cut layer.
    """

    params: dict[str, tuple[np.ndarray, np.ndarray]]
    input_grad: np.ndarray


def _conv_backward(p: ConvParams, x: np.ndarray, g: np.ndarray):
    kh, kw = p.kernel_size
    _, oh, ow = g.shape
    xp = np.pad(x, ((0, 0), (p.pad, p.pad), (p.pad, p.pad)))
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(p.kernel)
    for m in range(kh):
        rows = slice(m * p.dilation, m * p.dilation + p.stride * (oh - 1) + 1, p.stride)
        for n in range(kw):
            cols = slice(n * p.dilation, n * p.dilation + p.stride * (ow - 1) + 1, p.stride)
            dk[:, :, m, n] = np.tensordot(g, xp[:, rows, cols], axes=([1, 2], [1, 2]))
            dxp[:, rows, cols] += np.tensordot(p.kernel[:, :, m, n], g, axes=(0, 0))
    h, w = x.shape[1:]
    dx = dxp[:, p.pad : p.pad + h, p.pad : p.pad + w]
    return dk, g.sum(axis=(1, 2)), dx


def _pool_backward(p: PoolParams, x: np.ndarray, g: np.ndarray, arg):
    dx = np.zeros(x.size)
    if p.kind == "max":
        np.add.at(dx, arg.reshape(-1), g.reshape(-1))
        return dx.reshape(x.shape)
    dx = dx.reshape(x.shape)
    c, h, w = x.shape
    _, oh, ow = g.shape
    share = g / pool_counts(x.shape, p)
    dxp = np.zeros((c, h + 2 * p.pad, w + 2 * p.pad))
    for m in range(p.window):
        rows = slice(m, m + p.stride * (oh - 1) + 1, p.stride)
        for n in range(p.window):
            cols = slice(n, n + p.stride * (ow - 1) + 1, p.stride)
            dxp[:, rows, cols] += share
    return dxp[:, p.pad : p.pad + h, p.pad : p.pad + w]


def backward(
    net: Network,
    record: ActivationRecord,
    grads: Mapping[str, np.ndarray] | tuple[str, np.ndarray],
    cut: str | int = 0,
) -> Gradients:
    """Reverse-mode gradients through the chain, stopping at layer ``cut``.

    ``grads`` maps layer names to gradients with respect to those layers'
    outputs (a single ``(name, grad)`` pair is accepted too); gradients injected
    at several layers are summed as they meet. Layers below ``cut`` (a name or
    a layer index) receive nothing.
    """
    if isinstance(grads, tuple):
        grads = dict([grads])
    injected = {}
    for name, g in grads.items():
        try:
            i = net.index(name)
        except KeyError:
            raise KeyError(f"backward: unknown layer name {name!r}") from None
        g = np.asarray(g, dtype=np.float64)
        if g.shape != record.outputs[i].shape:
            raise ShapeError(
                f"gradient for layer {name!r} has shape {g.shape}, "
                f"layer output has shape {record.outputs[i].shape}"
            )
        injected[i] = g
    if not injected:
        raise ValueError("backward: no gradient given")
    stop = net.index(cut) if isinstance(cut, str) else int(cut)
    top = max(injected)
    if not 0 <= stop <= top:
        raise ValueError(f"cut layer {cut!r} must lie at or below the highest gradient layer")

    out: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    g = np.zeros_like(record.outputs[top])
    for i in range(top, stop - 1, -1):
        if i in injected:
            g = g + injected[i]
        layer = net.layers[i]
        x = record.level(i)
        if layer.kind == "conv":
            dk, db, g = _conv_backward(layer.params, x, g)
            out[layer.name] = (dk, db)
        elif layer.kind == "relu":
            g = g * (record.outputs[i] > 0)
        elif layer.kind == "pool":
            g = _pool_backward(layer.params, x, g, record.argmax.get(i))
        else:
            v = x.reshape(-1)
            gv = g.reshape(-1)
            out[layer.name] = (np.outer(gv, v), gv.copy())
            g = (layer.params.weight.T @ gv).reshape(x.shape)
    return Gradients(params=out, input_grad=g)
