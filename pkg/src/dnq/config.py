"""Run configuration: INI-style files with a strict, documented schema.

Flat key=value pairs under sections; every key has a type and a default,
and unknown sections or keys are hard errors (silent hyperparameter typos
are the classic reproducibility killer).  Defaults follow the reference
training protocol: 400 epochs, noise from epoch 200 ramping over 50, SWA
for the last 100, SGD lr 0.015 with Nesterov momentum 0.9, weight decay
1e-3, batch 64, label smoothing 0.1.  The ``toy`` preset divides all epoch
counts by 10 for minutes-scale runs.

A resolved config serializes back to canonical INI text and to the run
manifest; loading either reproduces the identical resolved config.
"""

from __future__ import annotations

import configparser
import io
import json
from dataclasses import dataclass
from typing import Any, Dict, Optional

from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _bits(v: str):
    if v.lower() in ("none", ""):
        return None
    return int(v)


def _float_list(v: str):
    return tuple(float(x) for x in v.split(",") if x.strip())


def _int_list(v: str):
    return tuple(int(x) for x in v.split(",") if x.strip())


def _bit_pairs(v: str):
    out = []
    for part in v.split(","):
        part = part.strip()
        if not part:
            continue
        w, a = part.split(":")
        out.append((int(w), int(a)))
    return tuple(out)


def _bool(v: str) -> bool:
    if v.lower() in ("true", "1", "yes", "on"):
        return True
    if v.lower() in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_float(v: str):
    if v.lower() in ("none", ""):
        return None
    return float(v)


def _str(v: str) -> str:
    return v


# section -> key -> (parser, default-as-string)
SCHEMA: Dict[str, Dict[str, Any]] = {
    "data": {
        "kind": (_str, "blobs"),                 # blobs | idx
        "classes": (int, "10"),
        "per_class": (int, "500"),
        "test_per_class": (int, "200"),
        "dim": (int, "32"),
        "spread": (float, "1.0"),
        "seed": (int, "0"),
        "train_images": (_str, ""),
        "train_labels": (_str, ""),
        "test_images": (_str, ""),
        "test_labels": (_str, ""),
        "calib_size": (int, "100"),
        "calib_seed": (int, "0"),
    },
    "model": {
        "arch": (_str, "toy-mlp"),
        "hidden": (int, "128"),
        "conv_channels": (_int_list, "8,16"),
        "first_last_bits": (_bits, "8"),
    },
    "train": {
        "epochs": (int, "400"),
        "warmup_epochs": (int, "200"),
        "swa_start": (int, "300"),
        "ramp_epochs": (int, "50"),
        "lr": (float, "0.015"),
        "swa_lr": (_opt_float, "none"),
        "momentum": (float, "0.9"),
        "nesterov": (_bool, "true"),
        "weight_decay": (float, "0.001"),
        "batch_size": (int, "64"),
        "label_smoothing": (float, "0.1"),
        "beta_w": (float, "0.9"),
        "beta_a": (float, "0.9"),
        "p_drop": (float, "0.5"),
        "seed": (int, "0"),
        "weight_bits": (int, "4"),
        "act_bits": (int, "4"),
        "wqer": (_bool, "true"),
        "aqer": (_bool, "true"),
        "checkpoint_every": (int, "1"),
    },
    "ptq": {
        "weight_bits": (int, "4"),
        "act_bits": (int, "4"),
        "calib_size": (int, "100"),
    },
    "probe": {
        "trace_samples": (int, "32"),
        "sigma_grid": (_float_list, "0.001,0.002,0.005,0.01,0.03"),
        "draws_per_sigma": (int, "32"),
        "subset": (int, "1024"),
    },
    "ablate": {
        "seeds": (_int_list, "0,1,2,3,4"),
        "bit_configs": (_bit_pairs, "8:8,4:4,2:2"),
        "dry_run": (_bool, "false"),
    },
}

# Epoch-count keys scaled down by the toy preset.
TOY_SCALED = ("epochs", "warmup_epochs", "swa_start", "ramp_epochs")


@dataclass
class ResolvedConfig:
    """All defaults materialized; plain dict of section -> key -> value."""

    values: Dict[str, Dict[str, Any]]

    def __getitem__(self, section: str) -> Dict[str, Any]:
        return self.values[section]

    def to_ini(self) -> str:
        buf = io.StringIO()
        for section in SCHEMA:
            buf.write(f"[{section}]\n")
            for key in SCHEMA[section]:
                buf.write(f"{key} = {_format_value(self.values[section][key])}\n")
            buf.write("\n")
        return buf.getvalue()

    def to_dict(self) -> Dict[str, Dict[str, str]]:
        return {
            s: {k: _format_value(v) for k, v in kv.items()} for s, kv in self.values.items()
        }

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(
            epochs=t["epochs"], warmup_epochs=t["warmup_epochs"], swa_start=t["swa_start"],
            ramp_epochs=t["ramp_epochs"], lr=t["lr"], swa_lr=t["swa_lr"], momentum=t["momentum"],
            nesterov=t["nesterov"], weight_decay=t["weight_decay"], batch_size=t["batch_size"],
            label_smoothing=t["label_smoothing"], beta_w=t["beta_w"], beta_a=t["beta_a"],
            p_drop=t["p_drop"], seed=t["seed"], weight_bits=t["weight_bits"], act_bits=t["act_bits"],
            wqer=t["wqer"], aqer=t["aqer"], checkpoint_every=t["checkpoint_every"],
        )


def _format_value(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join(f"{w}:{a}" for w, a in v)
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_pairs(pairs: Dict[str, Dict[str, str]], source: str) -> ResolvedConfig:
    values: Dict[str, Dict[str, Any]] = {}
    for section, keys in pairs.items():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]; valid: {', '.join(SCHEMA)}")
        for key in keys:
            if key not in SCHEMA[section]:
                raise ConfigError(
                    f"{source}: unknown key {key!r} in [{section}]; valid: {', '.join(SCHEMA[section])}"
                )
    for section, schema in SCHEMA.items():
        values[section] = {}
        for key, (parse, default) in schema.items():
            raw = pairs.get(section, {}).get(key, default)
            try:
                values[section][key] = parse(raw)
            except (ValueError, TypeError) as e:
                raise ConfigError(f"{source}: bad value for {section}.{key}: {raw!r} ({e})") from e
    return ResolvedConfig(values)


def load_config(path: Optional[str] = None, toy: bool = False,
                seed_override: Optional[int] = None) -> ResolvedConfig:
    """Read an INI config file (or a run manifest JSON) and resolve defaults.

    ``toy`` divides all epoch counts by 10 (minimum 1).  ``seed_override``
    replaces train.seed.  ``path=None`` resolves pure defaults.
    """
    pairs: Dict[str, Dict[str, str]] = {}
    source = path or "<defaults>"
    if path is not None:
        if str(path).endswith(".json"):
            with open(path) as f:
                manifest = json.load(f)
            pairs = manifest["config"] if "config" in manifest else manifest
            pairs = {s: dict(kv) for s, kv in pairs.items()}
        else:
            cp = configparser.ConfigParser(interpolation=None)
            read = cp.read(path)
            if not read:
                raise ConfigError(f"config file not found: {path}")
            pairs = {s: dict(cp.items(s)) for s in cp.sections()}
    cfg = _parse_pairs(pairs, source)
    if toy:
        for key in TOY_SCALED:
            cfg.values["train"][key] = max(1, cfg.values["train"][key] // 10)
    if seed_override is not None:
        cfg.values["train"]["seed"] = int(seed_override)
    return cfg


def validate_config(cfg: ResolvedConfig) -> None:
    """Cross-key checks; raises ConfigError naming the offending keys."""
    t = cfg.values["train"]
    if t["warmup_epochs"] >= t["swa_start"]:
        raise ConfigError(
            f"train.warmup_epochs ({t['warmup_epochs']}) must be < train.swa_start ({t['swa_start']})"
        )
    errs = cfg.train_config().validate()
    if errs:
        raise ConfigError("; ".join(f"train.{e}" for e in errs))
    d = cfg.values["data"]
    if d["kind"] not in ("blobs", "idx"):
        raise ConfigError(f"data.kind must be blobs or idx, got {d['kind']!r}")
    if d["kind"] == "idx":
        for k in ("train_images", "train_labels", "test_images", "test_labels"):
            if not d[k]:
                raise ConfigError(f"data.kind=idx requires data.{k}")
    p = cfg.values["ptq"]
    for k in ("weight_bits", "act_bits"):
        if p[k] not in (2, 3, 4, 8):
            raise ConfigError(f"ptq.{k}={p[k]} not in (2, 3, 4, 8)")
    if p["calib_size"] < 1:
        raise ConfigError(f"ptq.calib_size must be >= 1, got {p['calib_size']}")
    m = cfg.values["model"]
    if m["first_last_bits"] is not None and m["first_last_bits"] not in (2, 3, 4, 8):
        raise ConfigError(f"model.first_last_bits={m['first_last_bits']} not in (2, 3, 4, 8) or none")
    pr = cfg.values["probe"]
    if pr["trace_samples"] < 2:
        raise ConfigError(f"probe.trace_samples must be >= 2, got {pr['trace_samples']}")
    if pr["draws_per_sigma"] < 1 or pr["subset"] < 1:
        raise ConfigError("probe.draws_per_sigma and probe.subset must be >= 1")
    if any(s < 0 for s in pr["sigma_grid"]):
        raise ConfigError("probe.sigma_grid values must be >= 0")
    for w, a in cfg.values["ablate"]["bit_configs"]:
        if w not in (2, 3, 4, 8) or a not in (2, 3, 4, 8):
            raise ConfigError(f"ablate.bit_configs entry {w}:{a} not in (2, 3, 4, 8)")
    if len(cfg.values["ablate"]["seeds"]) < 1:
        raise ConfigError("ablate.seeds must list at least one seed")
