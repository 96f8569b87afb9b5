"""Simple post-training quantization and its evaluation.

"Simple" means min-max calibration only: per-channel over the stored
weights, per-tensor over activations observed on one calibration pass of
the full-precision model.  No rounding optimization, no reconstruction --
the point of noise-preconditioned training is that this is enough.

The layer report decomposes the output deviation of a quantized layer.
With weight error dW = W_hat - W and input error dx = x_hat - x:

    W_hat x_hat - W x = W dx + dW x + dW dx

an exact algebraic identity whose three terms (activation-induced,
weight-induced, second-order) are reported as per-layer mean squared norms,
evaluated over a dataset.  The expectation is taken over the provided data.
"""

from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

from .autograd import Graph, Tensor, forward
from .datasets import LabeledDataset
from .models import act_bits_map, weight_bits_map
from .noise_stats import capture_layer_inputs
from .quantizer import QuantParams, calibrate_minmax, fake_quantize


@dataclass
class PtqConfig:
    weight_bits: int = 4
    act_bits: int = 4
    first_last_bits: Optional[int] = 8   # pins the outer layers; None disables
    calib_size: int = 100
    bypass: bool = False                 # skip quantization entirely (FP reference)

    def validate(self):
        if not self.bypass:
            for nm, b in (("weight_bits", self.weight_bits), ("act_bits", self.act_bits)):
                if b not in (2, 3, 4, 8):
                    raise ValueError(f"{nm}={b} not in (2, 3, 4, 8)")
        if self.calib_size < 1:
            raise ValueError(f"calib_size must be >= 1, got {self.calib_size}")


@dataclass
class QuantizedModel:
    graph: Graph
    params: "OrderedDict[str, Tensor]"            # fake-quantized weights, original biases
    fp_params: "OrderedDict[str, Tensor]"
    weight_qparams: Dict[str, QuantParams] = field(default_factory=dict)
    act_qparams: Dict[str, QuantParams] = field(default_factory=dict)
    bypass: bool = False


def ptq_calibrate(graph: Graph, params: Mapping[str, Tensor], calib: LabeledDataset,
                  cfg: PtqConfig) -> QuantizedModel:
    """Fit all quantizers from the checkpointed weights and one calib pass."""
    cfg.validate()
    if len(calib) == 0:
        raise ValueError("empty calibration set")
    fp = OrderedDict((k, Tensor(np.asarray(v))) for k, v in params.items())
    if cfg.bypass:
        return QuantizedModel(graph, fp, fp, bypass=True)

    w_bits = weight_bits_map(graph, cfg.weight_bits)
    a_bits = act_bits_map(graph, cfg.act_bits)

    qparams = OrderedDict((k, Tensor(np.asarray(v))) for k, v in params.items())
    weight_qp: Dict[str, QuantParams] = {}
    for _, node in graph.layer_nodes():
        if not node.attrs.get("quantize_weights", True):
            continue
        w_name = node.params[0]
        qp = calibrate_minmax(qparams[w_name].data, w_bits[node.name], axis=0)
        weight_qp[node.name] = qp
        qparams[w_name] = Tensor(fake_quantize(qparams[w_name].data, qp))

    act_qp: Dict[str, QuantParams] = {}
    sites = capture_layer_inputs(graph, fp, calib.inputs)
    for name, x in sites.items():
        act_qp[name] = calibrate_minmax(x, a_bits[name], axis=None)

    return QuantizedModel(graph, qparams, fp, weight_qp, act_qp, bypass=False)


def quantized_forward(qm: QuantizedModel, inputs: np.ndarray) -> np.ndarray:
    """Forward with fake-quantized weights and input-site fake quantization."""
    if qm.bypass:
        out, _ = forward(qm.graph, {"data": inputs}, qm.params)
        return out

    def act_tf(layer_name, x):
        qp = qm.act_qparams.get(layer_name)
        return x if qp is None else fake_quantize(x, qp)

    out, _ = forward(qm.graph, {"data": inputs}, qm.params, act_transform=act_tf)
    return out


def evaluate(model: Union[QuantizedModel, Tuple[Graph, Mapping[str, Tensor]]],
             ds: LabeledDataset, batch_size: int = 256) -> float:
    """Deterministic top-1 accuracy."""
    if len(ds) == 0:
        raise ValueError("empty evaluation dataset")
    correct = 0
    for i in range(0, len(ds), batch_size):
        x = ds.inputs[i : i + batch_size]
        if isinstance(model, QuantizedModel):
            logits = quantized_forward(model, x)
        else:
            graph, params = model
            logits, _ = forward(graph, {"data": x}, params)
        correct += int((logits.argmax(axis=1) == ds.labels[i : i + batch_size]).sum())
    return correct / len(ds)


def _layer_apply(node, w64: np.ndarray, x64: np.ndarray) -> np.ndarray:
    """The layer's linear map without bias (bias cancels in deviations)."""
    if node.kind == "linear":
        return x64 @ w64.T
    # conv2d
    from .autograd import _im2col  # local import to keep the public surface tidy

    co, ci, kh, kw = w64.shape
    pad = int(node.attrs.get("padding", kh // 2))
    cols = _im2col(x64, kh, kw, pad)
    out = cols.reshape(-1, ci * kh * kw) @ w64.reshape(co, -1).T
    b, ho, wo = x64.shape[0], cols.shape[1], cols.shape[2]
    return out.reshape(b, ho, wo, co).transpose(0, 3, 1, 2)


def layer_mse_report(qm: QuantizedModel, ds: LabeledDataset, batch_size: int = 256) -> "OrderedDict[str, dict]":
    """Per-layer MSE of the output deviation and its three components.

    Layer inputs are taken from the full-precision forward (local analysis:
    each layer sees the same x in both models, with dx its own quantization
    error).  All math runs in float64.
    """
    rows: "OrderedDict[str, dict]" = OrderedDict()
    layer_nodes = {node.name: node for _, node in qm.graph.layer_nodes()}
    acc: Dict[str, Dict[str, float]] = {
        name: {"total": 0.0, "aqe": 0.0, "wqe": 0.0, "second": 0.0, "n": 0} for name in layer_nodes
    }

    for i in range(0, len(ds), batch_size):
        x_in = ds.inputs[i : i + batch_size]
        sites = capture_layer_inputs(qm.graph, qm.fp_params, x_in, only_quantized=False)
        for name, x in sites.items():
            node = layer_nodes[name]
            w = qm.fp_params[node.params[0]].data.astype(np.float64)
            w_hat = qm.params[node.params[0]].data.astype(np.float64)
            x64 = x.astype(np.float64)
            qp = qm.act_qparams.get(name)
            x_hat = x64 if qp is None or qm.bypass else fake_quantize(x64, qp)
            dw, dx = w_hat - w, x_hat - x64

            total = _layer_apply(node, w_hat, x_hat) - _layer_apply(node, w, x64)
            aqe = _layer_apply(node, w, dx)
            wqe = _layer_apply(node, dw, x64)
            second = _layer_apply(node, dw, dx)

            a = acc[name]
            a["total"] += float((total ** 2).sum())
            a["aqe"] += float((aqe ** 2).sum())
            a["wqe"] += float((wqe ** 2).sum())
            a["second"] += float((second ** 2).sum())
            a["n"] += total.size

    for name, node in layer_nodes.items():
        a = acc[name]
        if a["n"] == 0:
            continue
        rows[name] = {
            "layer": name,
            "q_w": "-" if qm.bypass else (qm.weight_qparams[name].bits if name in qm.weight_qparams else "-"),
            "q_a": "-" if qm.bypass else (qm.act_qparams[name].bits if name in qm.act_qparams else "-"),
            "mse_total": a["total"] / a["n"],
            "mse_aqe_term": a["aqe"] / a["n"],
            "mse_wqe_term": a["wqe"] / a["n"],
            "mse_second_order": a["second"] / a["n"],
        }
    return rows


def write_layer_report(rows: Mapping[str, dict], path: str, header_note: str = ""):
    """CSV report; expectation is over the provided dataset (noted inline)."""
    with open(path, "w", newline="") as f:
        if header_note:
            f.write(f"# {header_note}\n")
        writer = csv.DictWriter(f, fieldnames=[
            "layer", "q_w", "q_a", "mse_total", "mse_aqe_term", "mse_wqe_term", "mse_second_order",
        ])
        writer.writeheader()
        for row in rows.values():
            writer.writerow(row)
