"""Measurement and modeling of quantization error statistics.

Weight quantization error (WQE) is the deviation a simulated low-bit pass
would impose on the current weights:

    E_w = fake_quantize(W) - W          (per-channel min-max calibration)

Activation quantization error (AQE) is measured the same way at every
quantizable layer input, using a small fixed calibration batch and
per-tensor calibration.  Both error populations are summarized as Gaussian
(mean, variance) groups -- per output channel for weights, a single group
per activation tensor -- and smoothed across epochs with an exponential
moving average.

Variances are population variances (divide by N), and the activation
variance pools every observed element across calibration samples, which is
the Gaussian maximum-likelihood fit to the full error multiset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

from .autograd import Graph, Tensor, as_array, forward
from .quantizer import calibrate_minmax, fake_quantize


class StatsError(ValueError):
    pass


@dataclass
class GroupStats:
    """Gaussian noise model for one layer: group means and variances."""

    mu: np.ndarray    # [C] for weights, scalar () for activations
    var: np.ndarray   # same shape, >= 0
    ema_initialized: bool = True

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float32)
        self.var = np.asarray(self.var, dtype=np.float32)
        if self.mu.shape != self.var.shape:
            raise StatsError(f"mu shape {self.mu.shape} != var shape {self.var.shape}")
        if np.any(self.var < 0):
            raise StatsError("negative variance")


@dataclass
class NoiseStats:
    """Per-layer smoothed (mu, sigma^2) entries for weights and activations."""

    weights: Dict[str, GroupStats] = field(default_factory=dict)
    acts: Dict[str, GroupStats] = field(default_factory=dict)


def measure_wqe(w, bits: int) -> np.ndarray:
    """Per-channel (axis 0) simulated quantization error of a weight tensor."""
    arr = as_array(w, np.float32)
    qp = calibrate_minmax(arr, bits, axis=0)
    return fake_quantize(arr, qp) - arr


def channel_stats(err: np.ndarray, axis: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Population mean/variance of each channel along ``axis``."""
    e = np.asarray(err, dtype=np.float64)
    if e.size == 0:
        raise StatsError("empty error tensor")
    reduce_axes = tuple(i for i in range(e.ndim) if i != axis % e.ndim)
    mu = e.mean(axis=reduce_axes)
    var = ((e - np.expand_dims(mu, reduce_axes)) ** 2).mean(axis=reduce_axes)
    return mu.astype(np.float32), var.astype(np.float32)


def capture_layer_inputs(graph: Graph, params: Mapping[str, Tensor], x: np.ndarray,
                         dtype=np.float32, only_quantized: bool = True) -> Dict[str, np.ndarray]:
    """Forward ``x`` and return the input tensor of every (quantizable) layer."""
    _, cache = forward(graph, {"data": x}, params, dtype=dtype)
    out = {}
    for i, node in graph.layer_nodes():
        if not only_quantized or node.attrs.get("quantize_acts", True):
            out[node.name] = cache.layer_inputs[i]
    return out


def measure_aqe(graph: Graph, params: Mapping[str, Tensor], calib_inputs: np.ndarray,
                act_bits: Union[int, Mapping[str, int]]) -> Dict[str, Tuple[float, float]]:
    """Per-tensor AQE (mu, sigma^2) at each quantizable layer input.

    Runs the calibration batch through the full-precision model, calibrates
    a per-tensor quantizer on the very activations observed, and pools the
    resulting errors across all samples and elements.
    """
    calib_inputs = np.asarray(calib_inputs)
    if calib_inputs.shape[0] == 0:
        raise StatsError("empty calibration set")
    sites = capture_layer_inputs(graph, params, calib_inputs)
    out = {}
    for name, x in sites.items():
        bits = act_bits if isinstance(act_bits, int) else act_bits[name]
        qp = calibrate_minmax(x, bits, axis=None)
        err = (fake_quantize(x, qp) - x).astype(np.float64)
        mu = err.mean()
        var = ((err - mu) ** 2).mean()
        out[name] = (float(mu), float(var))
    return out


def ema_update(entry: Optional[GroupStats], fresh_mu, fresh_var, beta: float) -> GroupStats:
    """Smooth fresh statistics into the running entry.

    The first update copies the fresh values outright (a zero start would
    bias early noise toward zero); afterwards mu and sigma^2 are smoothed
    independently with decay ``beta``.
    """
    fresh_mu = np.asarray(fresh_mu, dtype=np.float32)
    fresh_var = np.asarray(fresh_var, dtype=np.float32)
    if not (0.0 <= beta < 1.0):
        raise StatsError(f"EMA decay must be in [0, 1), got {beta}")
    if entry is None or not entry.ema_initialized:
        return GroupStats(fresh_mu.copy(), fresh_var.copy(), ema_initialized=True)
    if entry.mu.shape != fresh_mu.shape:
        raise StatsError(f"shape mismatch: {entry.mu.shape} vs {fresh_mu.shape}")
    mu = (beta * entry.mu + (1.0 - beta) * fresh_mu).astype(np.float32)
    var = (beta * entry.var + (1.0 - beta) * fresh_var).astype(np.float32)
    return GroupStats(mu, var, ema_initialized=True)


def stats_summary(stats: NoiseStats) -> Dict[str, Dict[str, float]]:
    """Per-layer scalars for the metrics stream.

    When both error kinds are modeled for a layer, the activation/weight
    sigma ratio is logged too; it is reported, never asserted, since it is
    data- and architecture-dependent.
    """
    out: Dict[str, Dict[str, float]] = {}
    for name, s in stats.weights.items():
        rec = out.setdefault(name, {})
        rec["mu_w_abs"] = float(np.abs(s.mu).mean())
        rec["sigma_w"] = float(np.sqrt(np.maximum(s.var, 0)).mean())
    for name, s in stats.acts.items():
        rec = out.setdefault(name, {})
        rec["sigma_x"] = float(np.sqrt(max(float(s.var), 0.0)))
        rec["mu_x"] = float(s.mu)
        if "sigma_w" in rec and rec["sigma_w"] > 0:
            rec["aqe_wqe_sigma_ratio"] = rec["sigma_x"] / rec["sigma_w"]
    return out
