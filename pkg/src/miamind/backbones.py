"""Small host networks with attention insertion points.

Three hosts are provided:

* ``mini_cnn``: conv3x3(C->16) relu mia maxpool conv3x3(16->32) relu mia maxpool flatten linear
* ``mini_segnet``: a one-skip encoder/decoder with attention at the bottleneck,
  ending in a per-pixel sigmoid
* ``flow_cnn``: the pooling-free variant used for (N, 1, 1, F) tabular rows

Each attention layer follows a variant tag: ``mia`` (full block), ``se_only``
(spatial branch frozen to ones, channel gate only) or ``none`` (identity).
Parameters are initialised from a generator keyed on (seed, parameter name),
so the variants built from one seed share every non-attention weight.
"""
from __future__ import annotations

import copy
import zlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import mia_attention as mia
from .autograd import Graph, Node
from .errors import BadShape, ShapeMismatch
from .mia_attention import MiaBlock, bottleneck_width, glorot_uniform

VARIANTS = ("mia", "se_only", "none")
LAYER_KINDS = ("conv3x3", "relu", "maxpool2x2", "mia", "upsample2x_nearest",
               "concat_skip", "linear", "flatten", "sigmoid")
ARCHS = ("mini_cnn", "mini_segnet", "flow_cnn")


@dataclass
class LayerSpec:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)
    name: str = ""


@dataclass
class Model:
    arch: str
    input_shape: tuple[int, int, int]
    classes: int
    variant: str
    reduction: int
    layers: list[LayerSpec]
    params: dict[str, np.ndarray]
    attention_enabled: dict[str, bool]
    seed: int = 0
    bias: bool = True

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def layer_params(self, layer: LayerSpec) -> dict[str, np.ndarray]:
        prefix = layer.name + "."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def mia_block(self, name: str) -> MiaBlock | None:
        """The attention block of layer ``name`` as a :class:`MiaBlock` (``None`` if disabled)."""
        layer = next(l for l in self.layers if l.name == name and l.kind == "mia")
        if not self.attention_enabled[name]:
            return None
        return MiaBlock(layer.params["channels"], self.reduction, **self.layer_params(layer))

    def mia_layers(self) -> list[str]:
        return [l.name for l in self.layers if l.kind == "mia"]


def _rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _init_conv(params, name, cin, cout, seed):
    params[f"{name}.weight"] = glorot_uniform(_rng(seed, f"{name}.weight"), (cout, cin, 3, 3),
                                              cin * 9, cout * 9)
    params[f"{name}.bias"] = np.zeros(cout)


def _init_linear(params, name, fin, fout, seed):
    params[f"{name}.weight"] = glorot_uniform(_rng(seed, f"{name}.weight"), (fout, fin), fin, fout)
    params[f"{name}.bias"] = np.zeros(fout)


def _init_mia(params, name, channels, reduction, variant, seed, bias):
    if variant == "none":
        return
    h = bottleneck_width(channels, reduction)
    params[f"{name}.W1"] = glorot_uniform(_rng(seed, f"{name}.W1"), (h, channels), channels, h)
    if bias:
        params[f"{name}.b1"] = np.zeros(h)
    params[f"{name}.W2"] = glorot_uniform(_rng(seed, f"{name}.W2"), (channels, h), h, channels)
    if bias:
        params[f"{name}.b2"] = np.zeros(channels)
    if variant == "mia":
        k = mia.KERNEL
        params[f"{name}.conv_kernel"] = glorot_uniform(
            _rng(seed, f"{name}.conv_kernel"), (1, 1, k, k), k * k, k * k)
        params[f"{name}.conv_bias"] = np.zeros(1)


def _check_variant(variant: str):
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def _assemble(arch, input_shape, classes, variant, reduction, seed, bias, layers):
    params: dict[str, np.ndarray] = {}
    enabled: dict[str, bool] = {}
    for layer in layers:
        p = layer.params
        if layer.kind == "conv3x3":
            _init_conv(params, layer.name, p["in"], p["out"], seed)
        elif layer.kind == "linear":
            _init_linear(params, layer.name, p["in"], p["out"], seed)
        elif layer.kind == "mia":
            _init_mia(params, layer.name, p["channels"], reduction, variant, seed, bias)
            enabled[layer.name] = variant != "none"
    model = Model(arch, tuple(input_shape), classes, variant, reduction, layers, params,
                  enabled, seed, bias)
    infer_shapes(model)
    return model


def build_mini_cnn(input_shape=(3, 32, 32), classes: int = 10, variant: str = "mia",
                   reduction: int = mia.DEFAULT_REDUCTION, seed: int = 0, bias: bool = True) -> Model:
    _check_variant(variant)
    C, H, W = input_shape
    if H % 4 or W % 4:
        raise BadShape(f"mini_cnn needs H and W divisible by 4, got {H}x{W}")
    layers = [
        LayerSpec("conv3x3", {"in": C, "out": 16}, "conv1"),
        LayerSpec("relu", name="relu1"),
        LayerSpec("mia", {"channels": 16}, "mia1"),
        LayerSpec("maxpool2x2", name="pool1"),
        LayerSpec("conv3x3", {"in": 16, "out": 32}, "conv2"),
        LayerSpec("relu", name="relu2"),
        LayerSpec("mia", {"channels": 32}, "mia2"),
        LayerSpec("maxpool2x2", name="pool2"),
        LayerSpec("flatten", name="flatten"),
        LayerSpec("linear", {"in": 32 * (H // 4) * (W // 4), "out": classes}, "fc"),
    ]
    return _assemble("mini_cnn", input_shape, classes, variant, reduction, seed, bias, layers)


def build_mini_segnet(input_shape=(1, 16, 16), variant: str = "mia",
                      reduction: int = mia.DEFAULT_REDUCTION, seed: int = 0, bias: bool = True) -> Model:
    _check_variant(variant)
    C, H, W = input_shape
    if H % 2 or W % 2:
        raise BadShape(f"mini_segnet needs H and W divisible by 2, got {H}x{W}")
    layers = [
        LayerSpec("conv3x3", {"in": C, "out": 8}, "enc1"),
        LayerSpec("relu", name="enc1_relu"),
        LayerSpec("maxpool2x2", name="pool"),
        LayerSpec("conv3x3", {"in": 8, "out": 16}, "enc2"),
        LayerSpec("relu", name="enc2_relu"),
        LayerSpec("mia", {"channels": 16}, "mia"),
        LayerSpec("upsample2x_nearest", name="up"),
        LayerSpec("concat_skip", {"from": "enc1_relu"}, "skip"),
        LayerSpec("conv3x3", {"in": 24, "out": 8}, "dec1"),
        LayerSpec("relu", name="dec1_relu"),
        LayerSpec("conv3x3", {"in": 8, "out": 1}, "head"),
        LayerSpec("sigmoid", name="prob"),
    ]
    return _assemble("mini_segnet", input_shape, 1, variant, reduction, seed, bias, layers)


def build_flow_cnn(features: int, classes: int = 2, variant: str = "mia",
                   reduction: int = mia.DEFAULT_REDUCTION, seed: int = 0, bias: bool = True) -> Model:
    """Host for (N, 1, 1, F) flow rows; no pooling since H == 1."""
    _check_variant(variant)
    if features < 1:
        raise BadShape("flow_cnn needs at least one feature")
    layers = [
        LayerSpec("conv3x3", {"in": 1, "out": 16}, "conv1"),
        LayerSpec("relu", name="relu1"),
        LayerSpec("mia", {"channels": 16}, "mia1"),
        LayerSpec("conv3x3", {"in": 16, "out": 16}, "conv2"),
        LayerSpec("relu", name="relu2"),
        LayerSpec("mia", {"channels": 16}, "mia2"),
        LayerSpec("flatten", name="flatten"),
        LayerSpec("linear", {"in": 16 * features, "out": classes}, "fc"),
    ]
    return _assemble("flow_cnn", (1, 1, features), classes, variant, reduction, seed, bias, layers)


def build_model(arch: str, input_shape, classes: int, variant: str = "mia",
                reduction: int = mia.DEFAULT_REDUCTION, seed: int = 0, bias: bool = True) -> Model:
    if arch == "mini_cnn":
        return build_mini_cnn(tuple(input_shape), classes, variant, reduction, seed, bias)
    if arch == "mini_segnet":
        return build_mini_segnet(tuple(input_shape), variant, reduction, seed, bias)
    if arch == "flow_cnn":
        return build_flow_cnn(int(input_shape[-1]), classes, variant, reduction, seed, bias)
    raise ValueError(f"unknown architecture {arch!r}")


# shape inference and forward pass ---------------------------------------------

def infer_shapes(model: Model) -> list[tuple[int, ...]]:
    """Per-layer output shapes (without batch); raises BadShape on a broken chain."""
    shape = tuple(model.input_shape)
    seen: dict[str, tuple[int, ...]] = {}
    out = []
    for layer in model.layers:
        p, kind = layer.params, layer.kind
        if kind == "conv3x3":
            if len(shape) != 3 or shape[0] != p["in"]:
                raise BadShape(f"{layer.name}: expects {p['in']} channels, got {shape}")
            shape = (p["out"],) + shape[1:]
        elif kind == "maxpool2x2":
            if shape[1] % 2 or shape[2] % 2:
                raise BadShape(f"{layer.name}: odd spatial extent {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif kind == "upsample2x_nearest":
            shape = (shape[0], shape[1] * 2, shape[2] * 2)
        elif kind == "concat_skip":
            other = seen[p["from"]]
            if other[1:] != shape[1:]:
                raise BadShape(f"{layer.name}: skip {other} incompatible with {shape}")
            shape = (shape[0] + other[0],) + shape[1:]
        elif kind == "mia":
            if shape[0] != p["channels"]:
                raise BadShape(f"{layer.name}: expects {p['channels']} channels, got {shape}")
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "linear":
            if shape != (p["in"],):
                raise BadShape(f"{layer.name}: expects ({p['in']},), got {shape}")
            shape = (p["out"],)
        elif kind not in ("relu", "sigmoid"):
            raise BadShape(f"unknown layer kind {kind!r}")
        seen[layer.name] = shape
        out.append(shape)
    return out


def bind_params(model: Model, g: Graph) -> dict[str, Node]:
    return {k: g.param(v, name=k) for k, v in model.params.items()}


def model_forward(model: Model, x, g: Graph, params: dict[str, Node] | None = None,
                  record: dict[str, dict[str, Node]] | None = None) -> Node:
    """Record the model on ``g`` and return the final activation.

    ``x`` may be an array or a node of ``g``. When ``record`` is given, the
    attention intermediates of each enabled block are stored in it by layer name.
    """
    xn = x if isinstance(x, Node) else g.leaf(x)
    if xn.value.ndim != 4 or xn.shape[1:] != tuple(model.input_shape):
        raise ShapeMismatch(f"input {xn.shape} does not match (N, {', '.join(map(str, model.input_shape))})")
    p = params if params is not None else bind_params(model, g)
    h = xn
    outputs: dict[str, Node] = {}
    for layer in model.layers:
        kind, name = layer.kind, layer.name
        if kind == "conv3x3":
            h = g.conv2d(h, p[f"{name}.weight"], p[f"{name}.bias"], padding=1)
        elif kind == "relu":
            h = g.relu(h)
        elif kind == "sigmoid":
            h = g.sigmoid(h)
        elif kind == "maxpool2x2":
            h = g.max_pool(h)
        elif kind == "upsample2x_nearest":
            h = g.upsample2x(h)
        elif kind == "concat_skip":
            h = g.concat(h, outputs[layer.params["from"]], axis=1)
        elif kind == "flatten":
            h = g.reshape(h, (h.shape[0], -1))
        elif kind == "linear":
            h = g.add(g.matmul(h, p[f"{name}.weight"], transpose_b=True), p[f"{name}.bias"])
        elif kind == "mia":
            if model.attention_enabled.get(name, False):
                block = model.mia_block(name)
                bp = {k: p[f"{name}.{k}"] for k in block.parameters()}
                h, maps = mia.forward_graph(h, block, bp)
                if record is not None:
                    record[name] = maps
        outputs[name] = h
    return h


def predict(model: Model, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eager forward pass over ``x`` in chunks."""
    chunks = []
    for i in range(0, len(x), batch_size):
        chunks.append(model_forward(model, x[i:i + batch_size], Graph()).value)
    return np.concatenate(chunks, axis=0)


# parameter audit ----------------------------------------------------------------

def param_count(model: Model) -> int:
    return int(sum(v.size for v in model.params.values()))


def layer_param_counts(model: Model) -> list[tuple[str, str, int]]:
    """(layer name, kind, parameter count) for every layer."""
    return [(l.name, l.kind, int(sum(v.size for v in model.layer_params(l).values())))
            for l in model.layers]


def attention_param_count(model: Model) -> int:
    return sum(n for _, kind, n in layer_param_counts(model) if kind == "mia")
