"""Loss-landscape sharpness probes.

Quantization perturbs a trained model's weights and activations; the loss
increase that perturbation causes is governed, near a minimum, by the
curvature (the gradient term vanishes).  Two complementary probes quantify
that curvature without second-order autodiff:

* Hessian-vector products by central differences of first-order gradients,
      H v ~= (grad L(w + h v) - grad L(w - h v)) / (2 h),
  exact for quadratics, feeding a Hutchinson trace estimate
  tr(H) = E[v^T H v] over Rademacher probes.

* A direct perturbation curve: mean loss gap dL(sigma) = E[L(W + eps) - L(W)]
  with eps drawn per layer from N(0, (sigma * rms(W_layer))^2), i.e. a
  relative perturbation so models of different scales are comparable.
  Near a minimum dL(sigma) grows ~ sigma^2.

Probes evaluate the clean (noise-free) label-smoothed loss on a fixed data
subset, in float64 so that gaps of order 1e-6 are resolvable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .autograd import Graph, Tensor, backward, forward
from .datasets import LabeledDataset
from .models import with_ce_loss


@dataclass
class SharpnessReport:
    trace: float
    trace_stderr: float
    curve: List[Tuple[float, float, float]]  # (sigma, dl_mean, dl_stderr)
    seed: int
    trace_samples: int = 0
    draws_per_sigma: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "trace": self.trace,
            "trace_stderr": self.trace_stderr,
            "curve": [{"sigma": s, "dl_mean": m, "dl_stderr": e} for s, m, e in self.curve],
            "seed": self.seed,
            "trace_samples": self.trace_samples,
            "draws_per_sigma": self.draws_per_sigma,
        }, indent=2)


def flatten_params(params: Mapping[str, Tensor]) -> Tuple[np.ndarray, List[Tuple[str, Tuple[int, ...], int]]]:
    """Pack parameters into one float64 vector plus an unpacking layout."""
    chunks, layout, off = [], [], 0
    for name, t in params.items():
        arr = np.asarray(t, dtype=np.float64).reshape(-1)
        chunks.append(arr)
        layout.append((name, tuple(np.asarray(t).shape), off))
        off += arr.size
    return np.concatenate(chunks) if chunks else np.zeros(0), layout


def unflatten_params(vec: np.ndarray, layout) -> Dict[str, np.ndarray]:
    out = {}
    for name, shape, off in layout:
        size = int(np.prod(shape)) if shape else 1
        out[name] = vec[off : off + size].reshape(shape)
    return out


def model_loss_fn(graph: Graph, params: Mapping[str, Tensor], ds: LabeledDataset,
                  label_smoothing: float = 0.1):
    """(loss_fn, grad_fn, w0) over the flat parameter vector, in float64."""
    loss_graph = with_ce_loss(graph, label_smoothing)
    w0, layout = flatten_params(params)
    inputs = {"data": ds.inputs.astype(np.float64), "labels": ds.labels}

    def loss_fn(w: np.ndarray) -> float:
        p = unflatten_params(w, layout)
        val, _ = forward(loss_graph, inputs, p, dtype=np.float64)
        return float(val)

    def grad_fn(w: np.ndarray) -> np.ndarray:
        p = unflatten_params(w, layout)
        val, cache = forward(loss_graph, inputs, p, dtype=np.float64)
        if not np.isfinite(val):
            raise FloatingPointError("non-finite loss during probe")
        grads = backward(loss_graph, cache, p)
        return np.concatenate([grads[name].reshape(-1) for name, _, _ in layout])

    return loss_fn, grad_fn, w0


def hvp(grad_fn: Callable[[np.ndarray], np.ndarray], w: np.ndarray, v: np.ndarray,
        h_scale: float = 1e-3) -> np.ndarray:
    """Central-difference Hessian-vector product at ``w``.

    h = h_scale * (1 + max|w|); exact for quadratic losses where the
    gradient is linear in w.
    """
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != w.shape:
        raise ValueError(f"direction shape {v.shape} != parameter shape {w.shape}")
    h = h_scale * (1.0 + float(np.abs(w).max(initial=0.0)))
    g_plus = np.asarray(grad_fn(w + h * v), dtype=np.float64)
    g_minus = np.asarray(grad_fn(w - h * v), dtype=np.float64)
    if not (np.isfinite(g_plus).all() and np.isfinite(g_minus).all()):
        raise FloatingPointError("non-finite gradient in hvp")
    return (g_plus - g_minus) / (2.0 * h)


def hutchinson_trace(grad_fn, w: np.ndarray, n_samples: int,
                     rng: np.random.Generator, h_scale: float = 1e-3) -> Tuple[float, float]:
    """Monte-Carlo trace estimate: mean of v^T H v over Rademacher v."""
    if n_samples < 2:
        raise ValueError(f"need at least 2 samples, got {n_samples}")
    w = np.asarray(w, dtype=np.float64)
    estimates = np.empty(n_samples)
    for i in range(n_samples):
        v = rng.integers(0, 2, size=w.shape).astype(np.float64) * 2.0 - 1.0
        estimates[i] = float(v @ hvp(grad_fn, w, v, h_scale))
    stderr = float(estimates.std(ddof=1) / np.sqrt(n_samples))
    return float(estimates.mean()), stderr


def perturbation_curve(loss_fn: Callable[[np.ndarray], float], w0: np.ndarray,
                       scales: np.ndarray, sigma_grid: Sequence[float],
                       draws_per_sigma: int, rng: np.random.Generator,
                       antithetic: bool = True) -> List[Tuple[float, float, float]]:
    """Mean loss gap per sigma under eps ~ N(0, (sigma * scales)^2).

    With ``antithetic`` each draw is the +-eps pair average, which cancels
    the odd (gradient) term of the gap exactly and leaves the curvature term
    the probe is after; the estimated expectation is unchanged.  Returns
    (sigma, mean gap, stderr) per grid point; sigma = 0 is exactly 0.
    """
    base = loss_fn(w0)
    curve = []
    for sigma in sigma_grid:
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        if sigma == 0:
            curve.append((0.0, 0.0, 0.0))
            continue
        gaps = np.empty(draws_per_sigma)
        for i in range(draws_per_sigma):
            eps = rng.standard_normal(w0.shape) * (sigma * scales)
            if antithetic:
                gaps[i] = 0.5 * ((loss_fn(w0 + eps) - base) + (loss_fn(w0 - eps) - base))
            else:
                gaps[i] = loss_fn(w0 + eps) - base
        stderr = float(gaps.std(ddof=1) / np.sqrt(draws_per_sigma)) if draws_per_sigma > 1 else 0.0
        curve.append((float(sigma), float(gaps.mean()), stderr))
    return curve


def perturbation_sharpness(graph: Graph, params: Mapping[str, Tensor], ds: LabeledDataset,
                           sigma_grid: Sequence[float], draws_per_sigma: int,
                           seed: int, label_smoothing: float = 0.1) -> List[Tuple[float, float, float]]:
    """dL(sigma) curve with per-layer RMS-scaled Gaussian weight noise.

    Only weight matrices are perturbed (relative perturbation: each layer's
    noise is scaled by its own weight RMS); biases keep their values.
    """
    loss_fn, _, w0 = model_loss_fn(graph, params, ds, label_smoothing)
    _, layout = flatten_params(params)
    scales = np.zeros_like(w0)
    for name, shape, off in layout:
        size = int(np.prod(shape)) if shape else 1
        if name.endswith(".weight"):
            seg = w0[off : off + size]
            scales[off : off + size] = np.sqrt(np.mean(seg ** 2))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x5A9])))
    return perturbation_curve(loss_fn, w0, scales, sigma_grid, draws_per_sigma, rng)


def sharpness_report(graph: Graph, params: Mapping[str, Tensor], ds: LabeledDataset,
                     sigma_grid: Sequence[float], draws_per_sigma: int, trace_samples: int,
                     seed: int, label_smoothing: float = 0.1) -> SharpnessReport:
    _, grad_fn, w0 = model_loss_fn(graph, params, ds, label_smoothing)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x7A3])))
    trace, stderr = hutchinson_trace(grad_fn, w0, trace_samples, rng)
    curve = perturbation_sharpness(graph, params, ds, sigma_grid, draws_per_sigma, seed, label_smoothing)
    return SharpnessReport(trace, stderr, curve, seed, trace_samples, draws_per_sigma)


def loglog_slope(curve: Sequence[Tuple[float, float, float]], lo: float, hi: float) -> float:
    """Least-squares slope of log dL vs log sigma over sigma in [lo, hi]."""
    pts = [(s, m) for s, m, _ in curve if lo <= s <= hi and m > 0]
    if len(pts) < 2:
        raise ValueError("need at least two positive curve points in range")
    xs = np.log([s for s, _ in pts])
    ys = np.log([m for _, m in pts])
    return float(np.polyfit(xs, ys, 1)[0])
