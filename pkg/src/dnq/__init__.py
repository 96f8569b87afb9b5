"""dnq: differential-noise training for quantization-robust models.

A desk-scale toolkit that statistically models weight/activation
quantization error, injects it as zero-mean differential (weights) and
Bernoulli-masked (activations) noise during full-precision training, then
verifies the result with simple post-training quantization and
loss-landscape flatness probes.
"""

__version__ = "0.1.0"

from .autograd import Graph, Tensor, backward, ce_label_smoothing, forward, grad_check
from .datasets import LabeledDataset, load_idx, sample_calibration, synth_blobs
from .flatness import SharpnessReport, hutchinson_trace, hvp, perturbation_sharpness, sharpness_report
from .models import ModelSpec, build, spec_from_arch, toy_cnn, toy_mlp
from .ptq import PtqConfig, QuantizedModel, evaluate, layer_mse_report, ptq_calibrate, quantized_forward
from .quantizer import QuantParams, calibrate_minmax, fake_quantize, quantize
from .trainer import TrainConfig, TrainResult, train

__all__ = [
    "Graph", "Tensor", "forward", "backward", "grad_check", "ce_label_smoothing",
    "LabeledDataset", "synth_blobs", "load_idx", "sample_calibration",
    "SharpnessReport", "hvp", "hutchinson_trace", "perturbation_sharpness", "sharpness_report",
    "ModelSpec", "build", "toy_mlp", "toy_cnn", "spec_from_arch",
    "QuantParams", "calibrate_minmax", "quantize", "fake_quantize",
    "PtqConfig", "QuantizedModel", "ptq_calibrate", "quantized_forward", "evaluate", "layer_mse_report",
    "TrainConfig", "TrainResult", "train",
    "__version__",
]
