"""Training-time noise injection from modeled quantization-error statistics.

Weights receive *differential* noise: at step t the perturbed copy is

    W'_t = W_t + f_ramp * (delta_t - delta_{t-1}),   delta ~ N(mu_w, sigma_w^2)

The difference of two i.i.d. samples is zero-mean even though the modeled
error distribution is not, so the stochastic gradient remains an unbiased
estimator of the smoothed objective.  delta_{t-1} is tracked per layer and
reset to zero at every epoch boundary, making per-epoch perturbations
telescope to the final sample.

Activations receive a Bernoulli-masked drop-in:

    x' = x + f_ramp * (M (*) delta_x),   M_ij ~ Bernoulli(p_drop)

f_ramp anneals the injected variance from 0 to 1 over the ramp epochs.

All randomness comes from counter-based streams keyed by (run seed, epoch,
layer, purpose), so enabling noise on one layer never shifts another
layer's draws and runs are reproducible and resumable at epoch granularity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .autograd import as_array
from .noise_stats import GroupStats

# Stream purposes; part of the PRNG key derivation.
PURPOSE_WEIGHT = 1
PURPOSE_ACT = 2
PURPOSE_MASK = 3


class InjectionError(RuntimeError):
    pass


def noise_stream(seed: int, epoch: int, layer_index: int, purpose: int) -> np.random.Generator:
    """Deterministic counter-based stream for one (layer, purpose) pair."""
    key = np.random.SeedSequence([seed, epoch, layer_index, purpose])
    return np.random.Generator(np.random.Philox(key))


def ramp_factor(epoch: int, warmup_epochs: int, ramp_epochs: int) -> float:
    """min(1, (e - E_warm) / E_ramp); only meaningful in the noise stage."""
    if ramp_epochs < 1:
        raise ValueError(f"ramp_epochs must be >= 1, got {ramp_epochs}")
    return min(1.0, (epoch - warmup_epochs) / ramp_epochs)


@dataclass
class NoiseState:
    """Per-layer previous weight-noise samples (reset at epoch start)."""

    prev: Dict[str, np.ndarray] = field(default_factory=dict)

    def reset(self):
        self.prev.clear()

    def previous(self, layer: str, shape) -> np.ndarray:
        if layer not in self.prev:
            self.prev[layer] = np.zeros(shape, dtype=np.float32)
        return self.prev[layer]


def sample_weight_noise(stats: Optional[GroupStats], shape, rng: np.random.Generator) -> np.ndarray:
    """Draw delta with each element of channel i ~ N(mu_i, sigma_i^2).

    Channel axis is 0; sigma^2 is floored at zero before sampling, so a
    degenerate entry reproduces mu exactly.
    """
    if stats is None or not stats.ema_initialized:
        raise InjectionError("weight noise requested before statistics were initialized")
    shape = tuple(shape)
    if stats.mu.shape != (shape[0],):
        raise InjectionError(f"stats have {stats.mu.shape} channels, weight has {shape[0]}")
    bshape = (-1,) + (1,) * (len(shape) - 1)
    mu = stats.mu.astype(np.float64).reshape(bshape)
    sigma = np.sqrt(np.maximum(stats.var.astype(np.float64), 0.0)).reshape(bshape)
    return (mu + sigma * rng.standard_normal(shape)).astype(np.float32)


def differential_perturb(w, delta_t: np.ndarray, delta_prev: np.ndarray, f_ramp: float) -> np.ndarray:
    """W + f_ramp * (delta_t - delta_prev) on a fresh array; W is untouched."""
    arr = as_array(w, np.float32)
    if delta_t.shape != arr.shape or delta_prev.shape != arr.shape:
        raise InjectionError(f"noise shape {delta_t.shape}/{delta_prev.shape} != weight shape {arr.shape}")
    return arr + np.float32(f_ramp) * (delta_t - delta_prev)


def stochastic_activation_perturb(x: np.ndarray, stats: Optional[GroupStats], p_drop: float,
                                  f_ramp: float, rng_noise: np.random.Generator,
                                  rng_mask: np.random.Generator) -> np.ndarray:
    """x + f_ramp * (M (*) delta_x) with per-element Gaussian delta and mask."""
    if stats is None or not stats.ema_initialized:
        raise InjectionError("activation noise requested before statistics were initialized")
    if not (0.0 <= p_drop <= 1.0):
        raise ValueError(f"p_drop must be in [0, 1], got {p_drop}")
    x = np.asarray(x)
    mu = float(stats.mu)
    sigma = float(np.sqrt(max(float(stats.var), 0.0)))
    delta = (mu + sigma * rng_noise.standard_normal(x.shape)).astype(x.dtype)
    mask = rng_mask.random(x.shape) < p_drop
    return x + np.asarray(f_ramp, dtype=x.dtype) * (mask * delta)
