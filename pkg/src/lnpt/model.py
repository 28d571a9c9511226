"""Architecture specs, parameter storage, and forward passes.

Every forward pass returns both the logits and the penultimate feature
map (the input to the final classifier): the whole training and pruning
machinery is built around that pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class AvgPool:
    kernel: int


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Union[Dense, Conv, Relu, AvgPool, GlobalAvgPool, Flatten]


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]  # (D,) for flat input, (C, H, W) for images
    class_count: int

    def __post_init__(self):
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            shape = _next_shape(shape, layer, i)
        last = self.layers[-1] if self.layers else None
        if not isinstance(last, Dense) or last.out_features != self.class_count:
            raise ConfigError(
                "model spec must end with a dense layer of width class_count")

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].in_features

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "layers": [_layer_to_dict(l) for l in self.layers],
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        layers = tuple(_layer_from_dict(l) for l in d["layers"])
        return ModelSpec(layers, tuple(d["input_shape"]), d["class_count"])


def _next_shape(shape, layer, i):
    if isinstance(layer, Dense):
        if shape != (layer.in_features,):
            raise ConfigError(f"layer {i}: dense expects ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    if isinstance(layer, Conv):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ConfigError(f"layer {i}: conv expects {layer.in_channels} channels, got {shape}")
        c, h, w = shape
        ho = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
        wo = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
        if ho <= 0 or wo <= 0:
            raise ConfigError(f"layer {i}: conv output collapses to {ho}x{wo}")
        return (layer.out_channels, ho, wo)
    if isinstance(layer, AvgPool):
        if len(shape) != 3 or shape[1] % layer.kernel or shape[2] % layer.kernel:
            raise ConfigError(f"layer {i}: pool kernel {layer.kernel} does not divide {shape}")
        return (shape[0], shape[1] // layer.kernel, shape[2] // layer.kernel)
    if isinstance(layer, GlobalAvgPool):
        if len(shape) != 3:
            raise ConfigError(f"layer {i}: global pool needs an image shape, got {shape}")
        return (shape[0],)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Relu):
        return shape
    raise ConfigError(f"layer {i}: unknown layer {layer!r}")


_LAYER_KINDS = {"dense": Dense, "conv": Conv, "relu": Relu, "avg_pool": AvgPool,
                "global_avg_pool": GlobalAvgPool, "flatten": Flatten}


def _layer_to_dict(layer: LayerSpec) -> dict:
    for kind, cls in _LAYER_KINDS.items():
        if isinstance(layer, cls):
            return {"kind": kind, **layer.__dict__}
    raise ConfigError(f"unknown layer {layer!r}")


def _layer_from_dict(d: dict) -> LayerSpec:
    d = dict(d)
    kind = d.pop("kind")
    if kind not in _LAYER_KINDS:
        raise ConfigError(f"unknown layer kind {kind!r}")
    return _LAYER_KINDS[kind](**d)


@dataclass
class ParamEntry:
    name: str
    layer_index: int
    kind: str  # "weight" or "bias"
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class Parameters:
    """Per-layer weight/bias arrays over one contiguous flat vector.

    The per-layer views alias the flat buffer, so writes through either
    side are visible through the other.
    """

    def __init__(self, spec: ModelSpec, dtype=np.float64):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.entries: list[ParamEntry] = []
        offset = 0
        for i, layer in enumerate(spec.layers):
            if isinstance(layer, Dense):
                shapes = [("weight", (layer.out_features, layer.in_features)),
                          ("bias", (layer.out_features,))]
            elif isinstance(layer, Conv):
                shapes = [("weight", (layer.out_channels, layer.in_channels,
                                      layer.kernel, layer.kernel)),
                          ("bias", (layer.out_channels,))]
            else:
                continue
            for kind, shape in shapes:
                self.entries.append(ParamEntry(f"layer{i}.{kind}", i, kind, shape, offset))
                offset += int(np.prod(shape))
        self.flat = np.zeros(offset, dtype=self.dtype)
        self._views = {e.name: self.flat[e.offset:e.offset + e.size].reshape(e.shape)
                       for e in self.entries}

    @property
    def count(self) -> int:
        return self.flat.size

    def view(self, name: str) -> np.ndarray:
        return self._views[name]

    def copy(self) -> "Parameters":
        dup = Parameters(self.spec, self.dtype)
        dup.flat[:] = self.flat
        return dup

    def set_flat(self, values: np.ndarray) -> None:
        if values.shape != self.flat.shape:
            raise ShapeError("set_flat", values.shape, self.flat.shape)
        self.flat[:] = values

    def leaf_tensors(self, requires_grad: bool) -> dict[str, T.Tensor]:
        """Tensors wrapping the live views; built fresh per forward pass."""
        return {name: T.Tensor(view, requires_grad=requires_grad)
                for name, view in self._views.items()}

    def collect_grad(self, leaves: dict[str, T.Tensor]) -> np.ndarray:
        """Assemble leaf gradients into a flat vector (zeros where absent)."""
        g = np.zeros_like(self.flat)
        for e in self.entries:
            leaf = leaves[e.name]
            if leaf.grad is not None:
                g[e.offset:e.offset + e.size] = leaf.grad.reshape(-1)
        return g


def init_params(spec: ModelSpec, seed: int, dtype=np.float64) -> Parameters:
    """Kaiming-normal weights (fan-in mode, relu gain), zero biases."""
    params = Parameters(spec, dtype)
    rng = np.random.default_rng(seed)
    for e in params.entries:
        if e.kind == "bias":
            continue  # stays zero
        layer = spec.layers[e.layer_index]
        if isinstance(layer, Dense):
            fan_in = layer.in_features
        else:
            fan_in = layer.in_channels * layer.kernel * layer.kernel
        std = math.sqrt(2.0 / fan_in)
        params.view(e.name)[...] = (rng.standard_normal(e.shape) * std).astype(params.dtype)
    return params


@dataclass
class ForwardOutput:
    logits: T.Tensor
    feature_map: T.Tensor
    param_tensors: dict[str, T.Tensor]


def forward(params: Parameters, batch: np.ndarray, train: bool = False) -> ForwardOutput:
    """Run the network; always exposes (logits, penultimate feature map)."""
    spec = params.spec
    x = np.asarray(batch, dtype=params.dtype)
    if len(spec.input_shape) > 1 and x.ndim == 2:
        if x.shape[1] != int(np.prod(spec.input_shape)):
            raise ShapeError("forward", x.shape, spec.input_shape)
        x = x.reshape((x.shape[0],) + spec.input_shape)
    elif x.shape[1:] != spec.input_shape:
        raise ShapeError("forward", x.shape, spec.input_shape)

    leaves = params.leaf_tensors(requires_grad=train)
    t = T.Tensor(x)
    feature_map = None
    last_dense = max(i for i, l in enumerate(spec.layers) if isinstance(l, Dense))
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            if i == last_dense:
                feature_map = t
            w = leaves[f"layer{i}.weight"]
            b = leaves[f"layer{i}.bias"]
            t = T.add(T.matmul(t, T.transpose(w)), b)
        elif isinstance(layer, Conv):
            w = leaves[f"layer{i}.weight"]
            b = leaves[f"layer{i}.bias"]
            t = T.add(T.conv2d(t, w, stride=layer.stride, pad=layer.pad), b)
        elif isinstance(layer, Relu):
            t = T.relu(t)
        elif isinstance(layer, AvgPool):
            t = T.avg_pool2d(t, layer.kernel)
        elif isinstance(layer, GlobalAvgPool):
            t = T.global_avg_pool(t)
        elif isinstance(layer, Flatten):
            t = T.flatten(t)
    return ForwardOutput(logits=t, feature_map=feature_map, param_tensors=leaves)


class ClassifierView:
    """The final dense layer's weight, bias, and Moore-Penrose pseudoinverse."""

    def __init__(self, params: Parameters):
        idx = max(i for i, l in enumerate(params.spec.layers) if isinstance(l, Dense))
        self.layer_index = idx
        self.weight = params.view(f"layer{idx}.weight")  # (K, M)
        self.bias = params.view(f"layer{idx}.bias")
        self._pinv: np.ndarray | None = None

    @property
    def pinv(self) -> np.ndarray:
        if self._pinv is None:
            self._pinv = np.linalg.pinv(self.weight)  # (M, K)
        return self._pinv


# ---------------------------------------------------------------------------
# desk-scale presets
# ---------------------------------------------------------------------------

PRESETS = ("mlp-small", "mlp-teacher", "mlp-tiny", "cnn-small")


def preset(name: str, input_shape: tuple[int, ...] = (784,), class_count: int = 10) -> ModelSpec:
    """Build a named preset for the given input shape and class count.

    The default widths target flattened MNIST; the input side adapts to
    whatever dataset the harness loads.
    """
    if name == "mlp-small":
        d = int(np.prod(input_shape))
        return _mlp((d, 300, 100), class_count)
    if name == "mlp-teacher":
        d = int(np.prod(input_shape))
        return _mlp((d, 800, 100), class_count)
    if name == "mlp-tiny":
        d = int(np.prod(input_shape))
        return _mlp((d, 16, 8), class_count)
    if name == "cnn-small":
        if len(input_shape) != 3:
            raise ConfigError("cnn-small needs a (C, H, W) input shape")
        c, h, w = input_shape
        if h % 4 or w % 4:
            raise ConfigError("cnn-small needs H and W divisible by 4")
        flat = 16 * (h // 4) * (w // 4)
        layers = (
            Conv(c, 8, kernel=3, stride=1, pad=1), Relu(), AvgPool(2),
            Conv(8, 16, kernel=3, stride=1, pad=1), Relu(), AvgPool(2),
            Flatten(), Dense(flat, class_count),
        )
        return ModelSpec(layers, input_shape, class_count)
    raise ConfigError(f"unknown preset {name!r} (known: {', '.join(PRESETS)})")


def _mlp(widths: tuple[int, ...], class_count: int) -> ModelSpec:
    layers: list[LayerSpec] = []
    for a, b in zip(widths[:-1], widths[1:]):
        layers += [Dense(a, b), Relu()]
    layers.append(Dense(widths[-1], class_count))
    return ModelSpec(tuple(layers), (widths[0],), class_count)
