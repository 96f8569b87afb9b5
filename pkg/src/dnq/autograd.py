"""Minimal dense-tensor autodiff core.

Static, topologically ordered graphs over float32 arrays with reverse-mode
differentiation.  The op set is deliberately small -- linear, 2-D convolution
(stride 1, zero padding), relu, 2x2-style average pooling, flatten, a few
elementwise helpers and a label-smoothed softmax cross-entropy head -- enough
for small MLP/CNN classifiers while keeping every derivative auditable.

Numerics: parameters and activations are float32; every reduction (matmul,
pooling, sums, softmax normalization) accumulates in float64 before casting
back, so a forward pass is bit-deterministic for identical inputs.  A float64
working mode is available for analysis paths (finite differences, curvature
probes) via the ``dtype`` argument.

The relu derivative at exactly 0 is defined as 0; finite-difference checks
must avoid points within ~1e-4 of that kink.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives inputs whose shapes do not compose."""


class GraphError(RuntimeError):
    """Raised for malformed graphs or out-of-order forward/backward calls."""


def as_array(x, dtype=np.float32) -> np.ndarray:
    """Coerce a Tensor or array-like to a contiguous ndarray of ``dtype``."""
    if isinstance(x, Tensor):
        x = x.data
    return np.ascontiguousarray(x, dtype=dtype)


class Tensor:
    """Dense n-d float32 value with an optional same-shape gradient slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.grad = None if grad is None else np.ascontiguousarray(grad, dtype=np.float32)
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != data shape {self.data.shape}")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), None if self.grad is None else self.grad.copy())

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'set' if self.grad is not None else 'none'})"


# Ops understood by forward/backward.  "linear" and "conv2d" consume
# parameters; the rest are pure.
OP_KINDS = (
    "input",
    "linear",
    "conv2d",
    "relu",
    "avgpool",
    "flatten",
    "add",
    "mul",
    "sum",
    "scale",
    "ce_smooth",
)


@dataclass(frozen=True)
class Node:
    kind: str
    name: str
    inputs: Tuple[int, ...] = ()
    params: Tuple[str, ...] = ()
    attrs: Mapping[str, Any] = field(default_factory=dict)


class Graph:
    """Ordered op list; storage order is the topological order.

    Node inputs may only reference already-added nodes, so the graph is
    acyclic by construction.  A graph holds no activation state; forward
    returns an explicit cache that backward consumes.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._ids: Dict[str, int] = {}

    def add(self, kind: str, name: str, inputs: Iterable[int] = (), params: Iterable[str] = (), **attrs) -> int:
        if kind not in OP_KINDS:
            raise GraphError(f"unknown op kind {kind!r}")
        if name in self._ids:
            raise GraphError(f"duplicate node name {name!r}")
        inputs = tuple(inputs)
        for i in inputs:
            if not (0 <= i < len(self.nodes)):
                raise GraphError(f"node {name!r} references undefined node id {i}")
        node = Node(kind, name, inputs, tuple(params), dict(attrs))
        self._ids[name] = len(self.nodes)
        self.nodes.append(node)
        return len(self.nodes) - 1

    def id_of(self, name: str) -> int:
        if name not in self._ids:
            raise GraphError(f"no node named {name!r}")
        return self._ids[name]

    @property
    def output_id(self) -> int:
        if not self.nodes:
            raise GraphError("empty graph")
        return len(self.nodes) - 1

    def layer_nodes(self) -> List[Tuple[int, Node]]:
        """(id, node) for every parameterized layer, in graph order."""
        return [(i, n) for i, n in enumerate(self.nodes) if n.kind in ("linear", "conv2d")]

    def param_names(self) -> List[str]:
        out: List[str] = []
        for n in self.nodes:
            out.extend(n.params)
        return out

    def __len__(self):
        return len(self.nodes)


@dataclass
class Cache:
    """Forward intermediates keyed by node id, consumed by backward."""

    outputs: Dict[int, np.ndarray] = field(default_factory=dict)
    layer_inputs: Dict[int, np.ndarray] = field(default_factory=dict)
    extras: Dict[int, Any] = field(default_factory=dict)
    dtype: Any = np.float32


def _mm(a: np.ndarray, b: np.ndarray, dtype) -> np.ndarray:
    """Matrix product with float64 accumulation, cast to ``dtype``."""
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(dtype)


def _im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    """[B,C,H,W] -> [B,Ho,Wo,C*kh*kw] patch matrix (copies)."""
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    B, C, H, W = xp.shape
    ho, wo = H - kh + 1, W - kw + 1
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(B, C, kh, kw, ho, wo), strides=(s[0], s[1], s[2], s[3], s[2], s[3])
    )
    return np.ascontiguousarray(view.transpose(0, 4, 5, 1, 2, 3)).reshape(B, ho, wo, C * kh * kw)


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, pad: int) -> np.ndarray:
    """Scatter-add inverse of _im2col; dcols is [B,Ho,Wo,C*kh*kw]."""
    B, C, H, W = x_shape
    ho, wo = H + 2 * pad - kh + 1, W + 2 * pad - kw + 1
    dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=np.float64)
    d = dcols.reshape(B, ho, wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for di in range(kh):
        for dj in range(kw):
            dxp[:, :, di : di + ho, dj : dj + wo] += d[:, :, di, dj]
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def _log_softmax64(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _smooth_targets(labels: np.ndarray, k: int, eps: float) -> np.ndarray:
    t = np.full((labels.size, k), eps / k, dtype=np.float64)
    t[np.arange(labels.size), labels] = 1.0 - eps + eps / k
    return t


def ce_label_smoothing(logits, label: int, eps: float) -> float:
    """Label-smoothed cross-entropy of a single 1-D logit vector.

    loss = -sum_k t_k * log softmax(logits)_k with t assigning 1-eps+eps/K to
    the true class and eps/K elsewhere.
    """
    z = as_array(logits, np.float64).reshape(-1)
    k = z.size
    if k < 2:
        raise ShapeError("need at least 2 classes")
    if not (0.0 <= eps < 1.0):
        raise ValueError(f"smoothing eps must be in [0, 1), got {eps}")
    if not (0 <= label < k):
        raise ValueError(f"label {label} out of range for {k} classes")
    logp = _log_softmax64(z[None, :])[0]
    t = _smooth_targets(np.array([label]), k, eps)[0]
    return float(-(t * logp).sum())


# act_transform(layer_name, x) -> x', applied to the input of every linear/
# conv node flagged quantize_acts.  The transform must be constant w.r.t. x
# (additive noise, fake quantization); backward treats it as identity.
ActTransform = Callable[[str, np.ndarray], np.ndarray]


def forward(
    graph: Graph,
    inputs: Mapping[str, np.ndarray],
    params: Mapping[str, Tensor],
    act_transform: Optional[ActTransform] = None,
    dtype=np.float32,
) -> Tuple[np.ndarray, Cache]:
    """Evaluate the graph, caching intermediates for backward.

    Returns the last node's value and the cache.  Raises ShapeError naming
    the offending node on any shape mismatch.
    """
    cache = Cache(dtype=dtype)

    def p(name: str) -> np.ndarray:
        if name not in params:
            raise GraphError(f"missing parameter {name!r}")
        return as_array(params[name], dtype)

    for i, node in enumerate(graph.nodes):
        xs = [cache.outputs[j] for j in node.inputs]
        if node.kind == "input":
            if node.name not in inputs:
                raise GraphError(f"missing input {node.name!r}")
            out = np.asarray(inputs[node.name])
            if out.dtype.kind == "f":
                out = out.astype(dtype)
            want = node.attrs.get("shape")
            if want is not None and tuple(out.shape[1:]) != tuple(want):
                raise ShapeError(f"node {node.name!r} expects per-sample shape {tuple(want)}, got {tuple(out.shape[1:])}")
        elif node.kind == "linear":
            (x,) = xs
            w, b = p(node.params[0]), p(node.params[1])
            if x.ndim != 2 or x.shape[1] != w.shape[1]:
                raise ShapeError(
                    f"node {node.name!r} expects input [batch, {w.shape[1]}], got {tuple(x.shape)}"
                )
            if act_transform is not None and node.attrs.get("quantize_acts", False):
                x = np.asarray(act_transform(node.name, x), dtype=dtype)
            cache.layer_inputs[i] = x
            out = _mm(x, w.T, dtype) + b
        elif node.kind == "conv2d":
            (x,) = xs
            w, b = p(node.params[0]), p(node.params[1])
            co, ci, kh, kw = w.shape
            if x.ndim != 4 or x.shape[1] != ci:
                raise ShapeError(f"node {node.name!r} expects input [batch, {ci}, H, W], got {tuple(x.shape)}")
            if act_transform is not None and node.attrs.get("quantize_acts", False):
                x = np.asarray(act_transform(node.name, x), dtype=dtype)
            cache.layer_inputs[i] = x
            pad = int(node.attrs.get("padding", kh // 2))
            cols = _im2col(x, kh, kw, pad)
            out = _mm(cols.reshape(-1, ci * kh * kw), w.reshape(co, -1).T, dtype)
            b_, ho, wo = x.shape[0], cols.shape[1], cols.shape[2]
            out = (out.reshape(b_, ho, wo, co) + b).transpose(0, 3, 1, 2)
            out = np.ascontiguousarray(out)
        elif node.kind == "relu":
            (x,) = xs
            out = np.maximum(x, 0)
        elif node.kind == "avgpool":
            (x,) = xs
            k = int(node.attrs.get("pool", 2))
            if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
                raise ShapeError(f"node {node.name!r} needs [B,C,H,W] with H,W divisible by {k}, got {tuple(x.shape)}")
            b_, c, h, w_ = x.shape
            out = x.reshape(b_, c, h // k, k, w_ // k, k).mean(axis=(3, 5), dtype=np.float64).astype(dtype)
        elif node.kind == "flatten":
            (x,) = xs
            out = np.ascontiguousarray(x.reshape(x.shape[0], -1))
        elif node.kind == "add":
            a, b = xs
            if a.shape != b.shape:
                raise ShapeError(f"node {node.name!r}: shapes {a.shape} vs {b.shape}")
            out = (a.astype(np.float64) + b.astype(np.float64)).astype(dtype)
        elif node.kind == "mul":
            a, b = xs
            if a.shape != b.shape:
                raise ShapeError(f"node {node.name!r}: shapes {a.shape} vs {b.shape}")
            out = (a.astype(np.float64) * b.astype(np.float64)).astype(dtype)
        elif node.kind == "sum":
            (x,) = xs
            out = np.asarray(x.sum(dtype=np.float64), dtype=dtype)
        elif node.kind == "scale":
            (x,) = xs
            out = (x.astype(np.float64) * float(node.attrs["c"])).astype(dtype)
        elif node.kind == "ce_smooth":
            logits = xs[0]
            labels_node = graph.nodes[node.inputs[1]]
            labels = np.asarray(inputs[labels_node.name]).reshape(-1).astype(np.int64)
            if logits.ndim != 2:
                raise ShapeError(f"node {node.name!r} expects logits [batch, classes], got {tuple(logits.shape)}")
            k = logits.shape[1]
            if labels.size == 0 or labels.min() < 0 or labels.max() >= k:
                raise ValueError(f"node {node.name!r}: label out of range for {k} classes")
            eps = float(node.attrs.get("eps", 0.0))
            logp = _log_softmax64(logits)
            t = _smooth_targets(labels, k, eps)
            cache.extras[i] = (np.exp(logp), t)
            out = np.asarray(-(t * logp).sum(dtype=np.float64) / logits.shape[0], dtype=dtype)
        else:  # pragma: no cover
            raise GraphError(f"unhandled kind {node.kind!r}")
        cache.outputs[i] = out
    return cache.outputs[graph.output_id], cache


def backward(graph: Graph, cache: Cache, params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
    """Reverse pass from the (scalar) last node; fills Tensor.grad slots.

    Gradients of parameters the graph never touches are zero.  Requires the
    cache produced by a prior forward over the same graph.
    """
    if not cache.outputs or graph.output_id not in cache.outputs:
        raise GraphError("backward before forward: no cached activations for this graph")
    out = cache.outputs[graph.output_id]
    if out.size != 1:
        raise GraphError(f"loss node must be scalar, got shape {tuple(out.shape)}")
    dtype = cache.dtype

    node_grads: Dict[int, np.ndarray] = {graph.output_id: np.ones_like(out, dtype=np.float64)}
    grads = {name: np.zeros_like(as_array(t, dtype), dtype=np.float64) for name, t in params.items()}

    def send(j: int, g: np.ndarray):
        if j in node_grads:
            node_grads[j] = node_grads[j] + g
        else:
            node_grads[j] = g

    for i in range(graph.output_id, -1, -1):
        if i not in node_grads:
            continue
        node = graph.nodes[i]
        g = node_grads[i].astype(np.float64)
        if node.kind == "input":
            continue
        if i not in cache.outputs:
            raise GraphError(f"backward before forward: node {node.name!r} missing from cache")
        if node.kind == "linear":
            x = cache.layer_inputs[i].astype(np.float64)
            w = as_array(params[node.params[0]], np.float64)
            grads[node.params[0]] += g.T @ x
            grads[node.params[1]] += g.sum(axis=0)
            send(node.inputs[0], g @ w)
        elif node.kind == "conv2d":
            x = cache.layer_inputs[i]
            w = as_array(params[node.params[0]], np.float64)
            co, ci, kh, kw = w.shape
            pad = int(node.attrs.get("padding", kh // 2))
            cols = _im2col(x, kh, kw, pad).astype(np.float64)
            gmat = g.transpose(0, 2, 3, 1).reshape(-1, co)
            grads[node.params[0]] += (gmat.T @ cols.reshape(gmat.shape[0], -1)).reshape(w.shape)
            grads[node.params[1]] += g.sum(axis=(0, 2, 3))
            dcols = gmat @ w.reshape(co, -1)
            send(node.inputs[0], _col2im(dcols.reshape(cols.shape), x.shape, kh, kw, pad))
        elif node.kind == "relu":
            x = cache.outputs[node.inputs[0]]
            send(node.inputs[0], g * (x > 0))
        elif node.kind == "avgpool":
            k = int(node.attrs.get("pool", 2))
            send(node.inputs[0], np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k))
        elif node.kind == "flatten":
            x = cache.outputs[node.inputs[0]]
            send(node.inputs[0], g.reshape(x.shape))
        elif node.kind == "add":
            send(node.inputs[0], g)
            send(node.inputs[1], g.copy())
        elif node.kind == "mul":
            a = cache.outputs[node.inputs[0]].astype(np.float64)
            b = cache.outputs[node.inputs[1]].astype(np.float64)
            send(node.inputs[0], g * b)
            send(node.inputs[1], g * a)
        elif node.kind == "sum":
            x = cache.outputs[node.inputs[0]]
            send(node.inputs[0], np.broadcast_to(g, x.shape).astype(np.float64))
        elif node.kind == "scale":
            send(node.inputs[0], g * float(node.attrs["c"]))
        elif node.kind == "ce_smooth":
            probs, t = cache.extras[i]
            batch = probs.shape[0]
            send(node.inputs[0], float(g) * (probs - t) / batch)
        # labels input gets no gradient

    out_grads: Dict[str, np.ndarray] = {}
    for name, t in params.items():
        garr = grads[name].astype(dtype)
        out_grads[name] = garr
        if isinstance(t, Tensor):
            t.grad = garr.astype(np.float32)
    return out_grads


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst_param: str = ""
    worst_index: int = -1
    message: str = ""


def grad_check(
    graph: Graph,
    inputs: Mapping[str, np.ndarray],
    params: Mapping[str, Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Runs in float64 so the comparison is limited by truncation error, not
    float32 round-off.  Brute-force over every parameter element; refuses
    graphs with more than 1e4 parameters.
    """
    total = sum(as_array(t).size for t in params.values())
    if total > 10_000:
        raise GraphError(f"grad_check is brute force; {total} parameters exceed the 1e4 limit")

    # Plain float64 arrays: wrapping in Tensor would round to float32 and
    # drown the finite differences in cast noise.
    work = {k: as_array(v, np.float64) for k, v in params.items()}
    loss, cache = forward(graph, inputs, work, dtype=np.float64)
    if not np.isfinite(loss).all():
        return GradCheckReport(False, float("inf"), message="non-finite loss at the evaluation point")
    analytic = backward(graph, cache, work)

    max_rel, worst_p, worst_i = 0.0, "", -1
    for name in work:
        flat = work[name].reshape(-1)
        for j in range(flat.size):
            h = step * (1.0 + abs(flat[j]))
            orig = flat[j]
            flat[j] = orig + h
            up = float(forward(graph, inputs, work, dtype=np.float64)[0])
            flat[j] = orig - h
            down = float(forward(graph, inputs, work, dtype=np.float64)[0])
            flat[j] = orig
            num = (up - down) / (2 * h)
            ana = float(analytic[name].reshape(-1)[j])
            if not np.isfinite(num):
                return GradCheckReport(False, float("inf"), name, j, "non-finite finite-difference value")
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
            if rel > max_rel:
                max_rel, worst_p, worst_i = rel, name, j
    passed = max_rel < tolerance
    msg = "" if passed else f"max rel err {max_rel:.3e} at {worst_p}[{worst_i}]"
    return GradCheckReport(passed, max_rel, worst_p, worst_i, msg)


def relu_kink_risk(cache: Cache, graph: Graph, margin: float = 1e-4) -> bool:
    """True if any relu input sits within ``margin`` of its kink at 0."""
    for i, node in enumerate(graph.nodes):
        if node.kind == "relu":
            x = cache.outputs[node.inputs[0]]
            if np.any(np.abs(x) < margin):
                return True
    return False
