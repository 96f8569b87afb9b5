"""Two-stage noise-injected training loop with SWA.

Stage 1 (epochs 1..warmup) is plain supervised training.  From the first
epoch after warmup, each epoch starts by re-measuring quantization-error
statistics on the current model (weights directly, activations on a fixed
calibration batch), smoothing them with an EMA, and resetting the
differential-noise history.  Every minibatch then trains through a
temporarily perturbed model: weights get differential Gaussian noise,
activations get Bernoulli-masked Gaussian noise, both scaled by a ramp
factor that anneals to 1.  The optimizer always updates the original,
unperturbed parameters.  From ``swa_start`` onward the post-epoch parameters
are absorbed into a running average, which becomes the final model.

The optimizer is SGD with Nesterov momentum:

    g <- grad + weight_decay * w
    v <- momentum * v + g
    w <- w - lr * (g + momentum * v)        (classical form: w <- w - lr * v)

The learning rate follows cosine annealing until the SWA phase, then stays
constant at ``swa_lr``.

Every random draw (batch order, noise, masks) is keyed by (seed, epoch,
layer, purpose), so a run is bit-reproducible and can resume from the last
completed epoch without perturbing the trajectory.
"""

from __future__ import annotations

import json
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import checkpoint
from .autograd import Graph, Tensor, backward, forward
from .datasets import LabeledDataset, is_calibration_of
from .injection import (
    PURPOSE_ACT,
    PURPOSE_MASK,
    PURPOSE_WEIGHT,
    NoiseState,
    differential_perturb,
    noise_stream,
    ramp_factor,
    sample_weight_noise,
    stochastic_activation_perturb,
)
from .models import ModelSpec, act_bits_map, build, weight_bits_map, with_ce_loss
from .noise_stats import GroupStats, NoiseStats, channel_stats, ema_update, measure_aqe, measure_wqe, stats_summary


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradient encountered."""


class ConfigValueError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 400
    warmup_epochs: int = 200
    swa_start: int = 300          # > epochs disables SWA
    ramp_epochs: int = 50
    lr: float = 0.015
    swa_lr: Optional[float] = None  # defaults to lr / 10
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 0.001
    batch_size: int = 64
    label_smoothing: float = 0.1
    beta_w: float = 0.9
    beta_a: float = 0.9
    p_drop: float = 0.5
    seed: int = 0
    weight_bits: int = 4
    act_bits: int = 4
    wqer: bool = True
    aqer: bool = True
    checkpoint_every: int = 1     # 0 keeps only final.ckpt + resume state

    def resolved_swa_lr(self) -> float:
        return self.lr / 10.0 if self.swa_lr is None else self.swa_lr

    def cos_epochs(self) -> int:
        return min(self.swa_start, self.epochs)

    def validate(self) -> List[str]:
        errs = []
        if self.epochs < 1:
            errs.append(f"epochs must be >= 1, got {self.epochs}")
        if not (0 <= self.warmup_epochs <= self.epochs):
            errs.append(f"warmup_epochs={self.warmup_epochs} outside [0, epochs={self.epochs}]")
        if self.warmup_epochs >= self.swa_start:
            errs.append(f"warmup_epochs={self.warmup_epochs} must be < swa_start={self.swa_start}")
        if self.ramp_epochs < 1:
            errs.append(f"ramp_epochs must be >= 1, got {self.ramp_epochs}")
        if self.batch_size < 1:
            errs.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 <= self.label_smoothing < 1.0):
            errs.append(f"label_smoothing={self.label_smoothing} outside [0, 1)")
        for nm, v in (("momentum", self.momentum), ("beta_w", self.beta_w), ("beta_a", self.beta_a)):
            if not (0.0 <= v < 1.0):
                errs.append(f"{nm}={v} outside [0, 1)")
        if not (0.0 <= self.p_drop <= 1.0):
            errs.append(f"p_drop={self.p_drop} outside [0, 1]")
        if self.lr <= 0:
            errs.append(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            errs.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        for nm, b in (("weight_bits", self.weight_bits), ("act_bits", self.act_bits)):
            if b not in (2, 3, 4, 8):
                errs.append(f"{nm}={b} not in (2, 3, 4, 8)")
        return errs


def cosine_lr(epoch: int, lr0: float, cos_epochs: int, swa_lr: float) -> float:
    """Cosine annealing for the first ``cos_epochs`` epochs, then constant."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if epoch < cos_epochs:
        return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / cos_epochs))
    return swa_lr


def sgd_nesterov_step(
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
    velocity: Dict[str, np.ndarray],
    nesterov: bool = True,
) -> None:
    """In-place SGD update; aborts on non-finite gradients."""
    lr32, m32, wd32 = np.float32(lr), np.float32(momentum), np.float32(weight_decay)
    for name, t in params.items():
        g = grads[name].astype(np.float32)
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for {name!r}")
        if weight_decay:
            g = g + wd32 * t.data
        v = velocity.get(name)
        v = g.copy() if v is None else m32 * v + g
        velocity[name] = v
        step = g + m32 * v if nesterov else v
        t.data = t.data - lr32 * step


def minibatch_indices(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Seed-determined shuffle of [0, n) split into batches (last may be short)."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch, 0xBA7C4])))
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class SwaState:
    """Streaming arithmetic mean of parameter snapshots.

    The average is held as a float32 hi/lo pair (double-float) so that the
    same state survives a round-trip through the float32 checkpoint
    container, keeping resumed runs bit-identical.
    """

    hi: Dict[str, np.ndarray] = field(default_factory=dict)
    lo: Dict[str, np.ndarray] = field(default_factory=dict)
    count: int = 0

    def average(self) -> "OrderedDict[str, np.ndarray]":
        if self.count == 0:
            raise ValueError("no snapshots absorbed")
        out = OrderedDict()
        for name in self.hi:
            out[name] = checkpoint.join_f64(self.hi[name], self.lo[name]).astype(np.float32)
        return out


def swa_update(state: SwaState, params: Dict[str, Tensor]) -> SwaState:
    """avg <- (avg * n + params) / (n + 1); n <- n + 1."""
    n = state.count
    for name, t in params.items():
        fresh = t.data.astype(np.float64)
        if n == 0:
            avg = fresh
        else:
            prev = checkpoint.join_f64(state.hi[name], state.lo[name])
            if prev.shape != fresh.shape:
                raise ValueError(f"snapshot shape mismatch for {name!r}")
            avg = (prev * n + fresh) / (n + 1)
        pair = checkpoint.split_f64(avg)
        state.hi[name], state.lo[name] = pair["hi"], pair["lo"]
    state.count = n + 1
    return state


@dataclass
class TrainResult:
    final_params: "OrderedDict[str, Tensor]"   # SWA average if active, else last iterate
    last_params: "OrderedDict[str, Tensor]"
    metrics: List[dict]
    graph: Graph
    swa_count: int


STATE_FILE = "train_state.ckpt"
METRICS_FILE = "metrics.jsonl"


def _save_state(run_dir: str, epoch: int, params, velocity, swa: SwaState, stats: NoiseStats):
    named: "OrderedDict[str, np.ndarray]" = OrderedDict()
    named["meta"] = np.array([epoch, swa.count], dtype=np.float32)
    for k, t in params.items():
        named[f"param/{k}"] = t.data
    for k, v in velocity.items():
        named[f"velocity/{k}"] = v
    for k in swa.hi:
        named[f"swa_hi/{k}"] = swa.hi[k]
        named[f"swa_lo/{k}"] = swa.lo[k]
    for k, s in stats.weights.items():
        named[f"wstats/{k}/mu"] = s.mu
        named[f"wstats/{k}/var"] = s.var
    for k, s in stats.acts.items():
        named[f"astats/{k}/mu"] = np.asarray(s.mu, dtype=np.float32).reshape(())
        named[f"astats/{k}/var"] = np.asarray(s.var, dtype=np.float32).reshape(())
    checkpoint.save(os.path.join(run_dir, STATE_FILE), named)


def _load_state(run_dir: str, template: Dict[str, Tensor]):
    named = checkpoint.load(os.path.join(run_dir, STATE_FILE))
    epoch, swa_count = int(named["meta"][0]), int(named["meta"][1])
    params = OrderedDict()
    velocity = {}
    swa = SwaState(count=swa_count)
    stats = NoiseStats()
    for key, arr in named.items():
        if key.startswith("param/"):
            name = key[len("param/"):]
            if name not in template or template[name].data.shape != arr.shape:
                raise checkpoint.CheckpointError(f"state tensor {name!r} does not match the model")
            params[name] = Tensor(arr)
        elif key.startswith("velocity/"):
            velocity[key[len("velocity/"):]] = arr
        elif key.startswith("swa_hi/"):
            swa.hi[key[len("swa_hi/"):]] = arr
        elif key.startswith("swa_lo/"):
            swa.lo[key[len("swa_lo/"):]] = arr
        elif key.startswith("wstats/") and key.endswith("/mu"):
            layer = key[len("wstats/"):-len("/mu")]
            stats.weights[layer] = GroupStats(arr, named[f"wstats/{layer}/var"])
        elif key.startswith("astats/") and key.endswith("/mu"):
            layer = key[len("astats/"):-len("/mu")]
            stats.acts[layer] = GroupStats(arr.reshape(()), named[f"astats/{layer}/var"].reshape(()))
    missing = [k for k in template if k not in params]
    if missing:
        raise checkpoint.CheckpointError(f"training state is missing parameters: {missing}")
    ordered = OrderedDict((k, params[k]) for k in template)
    return epoch, ordered, velocity, swa, stats


def _truncate_metrics(path: str, max_epoch: int):
    if not os.path.exists(path):
        return
    kept = []
    with open(path) as f:
        for line in f:
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                continue
            if rec.get("epoch", 10**9) <= max_epoch:
                kept.append(line)
    with open(path, "w") as f:
        f.writelines(kept)


def train(
    cfg: TrainConfig,
    spec: ModelSpec,
    train_ds: LabeledDataset,
    calib_ds: Optional[LabeledDataset] = None,
    run_dir: Optional[str] = None,
    resume: bool = False,
) -> TrainResult:
    """Run the full two-stage loop; see the module docstring.

    ``calib_ds`` is required when activation noise is enabled and must be
    drawn from the training data (checked by provenance tag).
    """
    errs = cfg.validate()
    if errs:
        raise ConfigValueError("; ".join(errs))
    if cfg.aqer and cfg.warmup_epochs < cfg.epochs:
        if calib_ds is None:
            raise ValueError("activation noise needs a calibration set")
        if not is_calibration_of(calib_ds, train_ds):
            raise ValueError(
                f"calibration data {calib_ds.provenance!r} was not drawn from training data {train_ds.provenance!r}"
            )

    graph, params = build(spec, cfg.seed)
    loss_graph = with_ce_loss(graph, cfg.label_smoothing)
    logits_id = graph.output_id
    w_bits = weight_bits_map(graph, cfg.weight_bits)
    a_bits = act_bits_map(graph, cfg.act_bits)
    layer_index = {node.name: li for li, (_, node) in enumerate(graph.layer_nodes())}

    velocity: Dict[str, np.ndarray] = {}
    swa = SwaState()
    stats = NoiseStats()
    noise_state = NoiseState()
    metrics: List[dict] = []
    start_epoch = 1

    metrics_path = os.path.join(run_dir, METRICS_FILE) if run_dir else None
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
    if resume:
        if not run_dir or not os.path.exists(os.path.join(run_dir, STATE_FILE)):
            raise FileNotFoundError("resume requested but no training state found")
        done, params, velocity, swa, stats = _load_state(run_dir, params)
        start_epoch = done + 1
        _truncate_metrics(metrics_path, done)
        with open(metrics_path) as f:
            metrics = [json.loads(line) for line in f if line.strip()]
    elif metrics_path and os.path.exists(metrics_path):
        os.remove(metrics_path)

    swa_lr = cfg.resolved_swa_lr()
    cos_epochs = cfg.cos_epochs()
    n = len(train_ds)

    for epoch in range(start_epoch, cfg.epochs + 1):
        lr = cosine_lr(epoch - 1, cfg.lr, cos_epochs, swa_lr)
        noisy = epoch > cfg.warmup_epochs and (cfg.wqer or cfg.aqer)
        f_ramp = ramp_factor(epoch, cfg.warmup_epochs, cfg.ramp_epochs) if noisy else 0.0

        if noisy:
            if cfg.wqer:
                for _, node in graph.layer_nodes():
                    if not node.attrs.get("quantize_weights", True):
                        continue
                    err = measure_wqe(params[node.params[0]], w_bits[node.name])
                    mu, var = channel_stats(err, axis=0)
                    stats.weights[node.name] = ema_update(stats.weights.get(node.name), mu, var, cfg.beta_w)
            if cfg.aqer:
                fresh = measure_aqe(graph, params, calib_ds.inputs, a_bits)
                for name, (mu, var) in fresh.items():
                    stats.acts[name] = ema_update(stats.acts.get(name), mu, var, cfg.beta_a)
            noise_state.reset()

        w_streams = {}
        act_streams = {}
        if noisy:
            for name, li in layer_index.items():
                if cfg.wqer and name in stats.weights:
                    w_streams[name] = noise_stream(cfg.seed, epoch, li, PURPOSE_WEIGHT)
                if cfg.aqer and name in stats.acts:
                    act_streams[name] = (
                        noise_stream(cfg.seed, epoch, li, PURPOSE_ACT),
                        noise_stream(cfg.seed, epoch, li, PURPOSE_MASK),
                    )

        act_tf = None
        if act_streams:
            def act_tf(layer_name, x, _streams=act_streams, _f=f_ramp):
                if layer_name not in _streams:
                    return x
                rn, rm = _streams[layer_name]
                return stochastic_activation_perturb(x, stats.acts[layer_name], cfg.p_drop, _f, rn, rm)

        loss_sum, correct = 0.0, 0
        for idx in minibatch_indices(n, cfg.batch_size, cfg.seed, epoch):
            x, y = train_ds.inputs[idx], train_ds.labels[idx]

            eff_params = params
            if w_streams:
                eff_params = OrderedDict(params)
                for name, rng in w_streams.items():
                    w_name = f"{name}.weight"
                    delta = sample_weight_noise(stats.weights[name], params[w_name].shape, rng)
                    prev = noise_state.previous(name, params[w_name].shape)
                    eff_params[w_name] = Tensor(differential_perturb(params[w_name], delta, prev, f_ramp))
                    noise_state.prev[name] = delta

            loss, cache = forward(loss_graph, {"data": x, "labels": y}, eff_params, act_transform=act_tf)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            grads = backward(loss_graph, cache, eff_params)
            # Perturbations are additive constants, so these gradients are
            # exactly the gradients w.r.t. the original parameters.
            sgd_nesterov_step(params, grads, lr, cfg.momentum, cfg.weight_decay, velocity, cfg.nesterov)

            loss_sum += float(loss) * len(idx)
            correct += int((cache.outputs[logits_id].argmax(axis=1) == y).sum())

        if epoch >= cfg.swa_start:
            swa_update(swa, params)

        record = {
            "epoch": epoch,
            "lr": lr,
            "f_ramp": f_ramp,
            "train_loss": loss_sum / n,
            "train_acc": correct / n,
            "noise": stats_summary(stats),
        }
        metrics.append(record)

        if run_dir:
            with open(metrics_path, "a") as f:
                f.write(json.dumps(record) + "\n")
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                checkpoint.save(os.path.join(run_dir, f"epoch_{epoch}.ckpt"),
                                {k: t.data for k, t in params.items()})
            _save_state(run_dir, epoch, params, velocity, swa, stats)

    if swa.count > 0:
        final = OrderedDict((k, Tensor(v)) for k, v in swa.average().items())
    else:
        final = OrderedDict((k, t.copy()) for k, t in params.items())

    if run_dir:
        checkpoint.save(os.path.join(run_dir, "final.ckpt"), {k: t.data for k, t in final.items()})

    return TrainResult(final, params, metrics, graph, swa.count)
