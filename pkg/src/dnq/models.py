"""Reference architectures: declarative specs, construction, serialization.

Two desk-scale models are provided: ``toy-mlp`` (flatten - linear(hidden) -
relu - linear) and ``toy-cnn`` (two conv/relu/pool blocks and a linear head).
Layer specs carry per-layer quantization flags and an optional bit-width
override; by default the first and last parameterized layers are pinned to
8 bits for stability, mirroring common low-bit evaluation practice.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import checkpoint
from .autograd import Graph, Tensor


class SpecError(ValueError):
    """Raised when a model spec's layers do not compose."""


@dataclass
class LayerSpec:
    kind: str                    # linear | conv2d | relu | avgpool | flatten
    name: str = ""
    size_in: int = 0             # features (linear) or channels (conv2d)
    size_out: int = 0
    kernel: int = 3
    padding: Optional[int] = None  # conv2d; defaults to kernel // 2
    pool: int = 2
    quantize_weights: bool = True
    quantize_activations: bool = True
    bit_width_override: Optional[int] = None

    @property
    def parameterized(self) -> bool:
        return self.kind in ("linear", "conv2d")


@dataclass
class ModelSpec:
    name: str
    input_shape: Tuple[int, ...]  # per-sample shape, batch excluded
    num_classes: int
    layers: List[LayerSpec] = field(default_factory=list)
    # Default bit override applied to the first and last parameterized
    # layers (None disables the pinning entirely).
    first_last_bits: Optional[int] = 8

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        counters: Dict[str, int] = {}
        prefixes = {"linear": "fc", "conv2d": "conv", "relu": "relu", "avgpool": "pool", "flatten": "flatten"}
        for layer in self.layers:
            if not layer.name:
                counters[layer.kind] = counters.get(layer.kind, 0) + 1
                layer.name = f"{prefixes.get(layer.kind, layer.kind)}{counters[layer.kind]}"
        if self.first_last_bits is not None:
            plist = [l for l in self.layers if l.parameterized]
            if plist:
                for l in (plist[0], plist[-1]):
                    if l.bit_width_override is None:
                        l.bit_width_override = self.first_last_bits

    def parameterized_layers(self) -> List[LayerSpec]:
        return [l for l in self.layers if l.parameterized]

    def validate(self):
        if not self.layers:
            raise SpecError(f"model {self.name!r} has an empty layer list")
        if self.num_classes < 2:
            raise SpecError(f"model {self.name!r} needs at least 2 classes")
        _trace_shapes(self)


def _trace_shapes(spec: ModelSpec) -> Tuple[int, ...]:
    """Walk the layer list, checking composability; returns output shape."""
    shape = spec.input_shape
    for layer in spec.layers:
        if layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "linear":
            if len(shape) != 1 or shape[0] != layer.size_in:
                raise SpecError(f"layer {layer.name!r} expects {layer.size_in} features, gets shape {shape}")
            shape = (layer.size_out,)
        elif layer.kind == "conv2d":
            if len(shape) != 3 or shape[0] != layer.size_in:
                raise SpecError(f"layer {layer.name!r} expects {layer.size_in} channels, gets shape {shape}")
            pad = layer.kernel // 2 if layer.padding is None else layer.padding
            h = shape[1] + 2 * pad - layer.kernel + 1
            w = shape[2] + 2 * pad - layer.kernel + 1
            if h <= 0 or w <= 0:
                raise SpecError(f"layer {layer.name!r} kernel {layer.kernel} too large for input {shape}")
            shape = (layer.size_out, h, w)
        elif layer.kind == "avgpool":
            if len(shape) != 3 or shape[1] % layer.pool or shape[2] % layer.pool:
                raise SpecError(f"layer {layer.name!r} needs H,W divisible by {layer.pool}, gets shape {shape}")
            shape = (shape[0], shape[1] // layer.pool, shape[2] // layer.pool)
        elif layer.kind == "relu":
            pass
        else:
            raise SpecError(f"layer {layer.name!r} has unknown kind {layer.kind!r}")
    if shape != (spec.num_classes,):
        raise SpecError(f"model {spec.name!r} ends with shape {shape}, expected ({spec.num_classes},)")
    return shape


def build(spec: ModelSpec, seed: int) -> Tuple[Graph, "OrderedDict[str, Tensor]"]:
    """Construct the graph and freshly initialized parameters.

    Weights are uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero;
    identical seeds give identical parameters.
    """
    spec.validate()
    graph = Graph()
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    prev = graph.add("input", "data", shape=spec.input_shape)

    for idx, layer in enumerate(spec.layers):
        if layer.kind in ("relu", "flatten"):
            prev = graph.add(layer.kind, layer.name, inputs=(prev,))
            continue
        if layer.kind == "avgpool":
            prev = graph.add("avgpool", layer.name, inputs=(prev,), pool=layer.pool)
            continue
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, idx])))
        w_name, b_name = f"{layer.name}.weight", f"{layer.name}.bias"
        if layer.kind == "linear":
            fan_in, fan_out = layer.size_in, layer.size_out
            w_shape = (layer.size_out, layer.size_in)
        else:
            fan_in = layer.size_in * layer.kernel * layer.kernel
            fan_out = layer.size_out * layer.kernel * layer.kernel
            w_shape = (layer.size_out, layer.size_in, layer.kernel, layer.kernel)
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[w_name] = Tensor(rng.uniform(-limit, limit, size=w_shape).astype(np.float32))
        params[b_name] = Tensor(np.zeros(layer.size_out, dtype=np.float32))
        attrs = dict(
            quantize_weights=layer.quantize_weights,
            quantize_acts=layer.quantize_activations,
            bits_override=layer.bit_width_override,
        )
        if layer.kind == "conv2d":
            attrs["padding"] = layer.kernel // 2 if layer.padding is None else layer.padding
        prev = graph.add(layer.kind, layer.name, inputs=(prev,), params=(w_name, b_name), **attrs)
    return graph, params


def with_ce_loss(graph: Graph, eps: float) -> Graph:
    """Clone the graph and append a label-smoothed cross-entropy head."""
    g = Graph()
    for n in graph.nodes:
        g.add(n.kind, n.name, inputs=n.inputs, params=n.params, **dict(n.attrs))
    labels = g.add("input", "labels")
    g.add("ce_smooth", "loss", inputs=(graph.output_id, labels), eps=eps)
    return g


def weight_bits_map(graph: Graph, q_w: int) -> Dict[str, int]:
    """Effective weight bit-width per quantizable layer (override wins)."""
    out = {}
    for _, node in graph.layer_nodes():
        if node.attrs.get("quantize_weights", True):
            out[node.name] = int(node.attrs.get("bits_override") or q_w)
    return out


def act_bits_map(graph: Graph, q_a: int) -> Dict[str, int]:
    """Effective activation bit-width per quantizable input site.

    The bit override pins a layer's weights; for activations it applies only
    to the first parameterized layer, whose input site is the raw network
    input (8-bit by nature).  Interior feature maps, including the input of
    the last layer, follow the requested activation width so that low-bit
    activation stress is actually exercised on shallow models.
    """
    out = {}
    first = True
    for _, node in graph.layer_nodes():
        if node.attrs.get("quantize_acts", True):
            override = node.attrs.get("bits_override")
            out[node.name] = int(override) if (first and override) else int(q_a)
        first = False
    return out


def toy_mlp(input_shape=784, hidden: int = 128, classes: int = 10,
            first_last_bits: Optional[int] = 8) -> ModelSpec:
    if isinstance(input_shape, int):
        input_shape = (input_shape,)
    flat = int(np.prod(input_shape))
    return ModelSpec(
        name="toy-mlp",
        input_shape=tuple(input_shape),
        num_classes=classes,
        layers=[
            LayerSpec("flatten"),
            LayerSpec("linear", size_in=flat, size_out=hidden),
            LayerSpec("relu"),
            LayerSpec("linear", size_in=hidden, size_out=classes),
        ],
        first_last_bits=first_last_bits,
    )


def toy_cnn(input_shape: Tuple[int, int, int] = (1, 28, 28), classes: int = 10,
            channels: Tuple[int, int] = (8, 16),
            first_last_bits: Optional[int] = 8) -> ModelSpec:
    c, h, w = input_shape
    flat = channels[1] * (h // 4) * (w // 4)
    return ModelSpec(
        name="toy-cnn",
        input_shape=input_shape,
        num_classes=classes,
        layers=[
            LayerSpec("conv2d", size_in=c, size_out=channels[0], kernel=3),
            LayerSpec("relu"),
            LayerSpec("avgpool"),
            LayerSpec("conv2d", size_in=channels[0], size_out=channels[1], kernel=3),
            LayerSpec("relu"),
            LayerSpec("avgpool"),
            LayerSpec("flatten"),
            LayerSpec("linear", size_in=flat, size_out=classes),
        ],
        first_last_bits=first_last_bits,
    )


def spec_from_arch(arch: str, input_shape: Tuple[int, ...], classes: int,
                   hidden: int = 128, channels: Tuple[int, int] = (8, 16),
                   first_last_bits: Optional[int] = 8) -> ModelSpec:
    if arch == "toy-mlp":
        return toy_mlp(input_shape, hidden, classes, first_last_bits)
    if arch == "toy-cnn":
        if len(input_shape) != 3:
            raise SpecError(f"toy-cnn needs [C,H,W] inputs, got {input_shape}")
        return toy_cnn(input_shape, classes, channels, first_last_bits)
    raise SpecError(f"unknown architecture {arch!r}")


def snapshot(params: Dict[str, Tensor]) -> bytes:
    """Serialize parameters to the container format (round-trip bit-exact)."""
    return checkpoint.dump_tensors({k: v.data for k, v in params.items()})


def restore(blob: bytes, template: Dict[str, Tensor]) -> "OrderedDict[str, Tensor]":
    """Parse a snapshot and validate names/shapes against ``template``."""
    loaded = checkpoint.parse_tensors(blob)
    return params_from_arrays(loaded, template)


def params_from_arrays(arrays: Dict[str, np.ndarray], template: Dict[str, Tensor]) -> "OrderedDict[str, Tensor]":
    out: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, ref in template.items():
        if name not in arrays:
            raise checkpoint.CheckpointError(f"checkpoint is missing tensor {name!r}")
        arr = arrays[name]
        if arr.shape != ref.data.shape:
            raise checkpoint.CheckpointError(
                f"dimension mismatch for {name!r}: checkpoint {arr.shape}, model {ref.data.shape}"
            )
        out[name] = Tensor(arr)
    return out
