"""Command-line entry point: train / ptq / probe / ablate / report.

    dnq train  --config c.ini --run-dir out [--seed N] [--toy] [--force] [--resume]
    dnq ptq    --config c.ini --run-dir out [--force]
    dnq probe  --config c.ini --run-dir out [--force]
    dnq ablate --config c.ini --run-dir out [--toy] [--force]
    dnq report --run-dir out [--force]

Every command refuses to overwrite a completed output without --force.
Exit codes: 0 ok, 2 invalid configuration, 3 data error, 4 numeric
divergence.  DNQ_THREADS caps ablation worker processes.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
import time
from typing import Dict, List, Optional, Tuple

from . import __version__, checkpoint, report
from .config import ConfigError, ResolvedConfig, load_config, validate_config
from .datasets import DataError, LabeledDataset, load_idx, sample_calibration, synth_blobs
from .flatness import perturbation_sharpness, sharpness_report
from .models import build, params_from_arrays, spec_from_arch
from .ptq import PtqConfig, evaluate, layer_mse_report, ptq_calibrate, write_layer_report
from .trainer import ConfigValueError, TrainingDiverged, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

MANIFEST_FILE = "manifest.json"

# Ablation arms: (name, wqer, aqer, swa)
ABLATION_ARMS = (
    ("baseline", False, False, False),
    ("swa_only", False, False, True),
    ("dnq_only", True, True, False),
    ("dnq_swa", True, True, True),
    ("wqer_only", True, False, True),
    ("aqer_only", False, True, True),
)


def make_datasets(cfg: ResolvedConfig) -> Tuple[LabeledDataset, LabeledDataset]:
    d = cfg["data"]
    if d["kind"] == "blobs":
        train_ds = synth_blobs(d["classes"], d["per_class"], d["dim"], d["spread"], d["seed"], "train")
        test_ds = synth_blobs(d["classes"], d["test_per_class"], d["dim"], d["spread"], d["seed"], "test")
    else:
        train_ds = load_idx(d["train_images"], d["train_labels"])
        test_ds = load_idx(d["test_images"], d["test_labels"])
    return train_ds, test_ds


def make_spec(cfg: ResolvedConfig, train_ds: LabeledDataset):
    m = cfg["model"]
    return spec_from_arch(
        m["arch"], tuple(train_ds.inputs.shape[1:]), train_ds.num_classes,
        hidden=m["hidden"], channels=tuple(m["conv_channels"]),
        first_last_bits=m["first_last_bits"],
    )


def make_calib(cfg: ResolvedConfig, train_ds: LabeledDataset, size_key: str = "calib_size") -> LabeledDataset:
    d = cfg["data"]
    return sample_calibration(train_ds, min(d[size_key], len(train_ds)), d["calib_seed"])


def write_manifest(run_dir: str, command: str, cfg: ResolvedConfig,
                   data_info: Dict[str, dict], status: str, started_at: float,
                   finished_at: Optional[float] = None) -> None:
    manifest = {
        "tool_version": __version__,
        "command": command,
        "seed": cfg["train"]["seed"],
        "config": cfg.to_dict(),
        "data": data_info,
        "started_at": started_at,
        "finished_at": finished_at,
        "status": status,
    }
    with open(os.path.join(run_dir, MANIFEST_FILE), "w") as f:
        json.dump(manifest, f, indent=2)


def _refuse_existing(path: str, force: bool, what: str) -> None:
    if os.path.exists(path) and not force:
        raise FileExistsError(f"{what} already exists at {path}; pass --force to overwrite")


def _load_final(cfg: ResolvedConfig, run_dir: str, train_ds: LabeledDataset):
    spec = make_spec(cfg, train_ds)
    graph, template = build(spec, cfg["train"]["seed"])
    ckpt_path = os.path.join(run_dir, "final.ckpt")
    if not os.path.exists(ckpt_path):
        raise DataError(f"no final.ckpt in {run_dir}; run `dnq train` first")
    params = params_from_arrays(checkpoint.load(ckpt_path), template)
    return spec, graph, params


def cmd_train(args) -> int:
    cfg = load_config(args.config, toy=args.toy, seed_override=args.seed)
    validate_config(cfg)
    run_dir = args.run_dir
    os.makedirs(run_dir, exist_ok=True)
    if not args.resume:
        _refuse_existing(os.path.join(run_dir, "final.ckpt"), args.force, "a completed run")

    train_ds, test_ds = make_datasets(cfg)
    calib_ds = make_calib(cfg, train_ds)
    spec = make_spec(cfg, train_ds)
    started = time.time()
    data_info = {
        "train": {"provenance": train_ds.provenance, "checksum": train_ds.checksum()},
        "test": {"provenance": test_ds.provenance, "checksum": test_ds.checksum()},
        "calib": {"provenance": calib_ds.provenance, "checksum": calib_ds.checksum()},
    }
    write_manifest(run_dir, "train", cfg, data_info, "running", started)

    result = train(cfg.train_config(), spec, train_ds, calib_ds, run_dir=run_dir, resume=args.resume)

    fp_acc = evaluate((result.graph, result.final_params), test_ds)
    print(f"trained {cfg['model']['arch']} for {cfg['train']['epochs']} epochs; "
          f"test accuracy {fp_acc:.4f} (swa snapshots: {result.swa_count})")
    write_manifest(run_dir, "train", cfg, data_info, "complete", started, time.time())
    return EXIT_OK


def cmd_ptq(args) -> int:
    cfg = load_config(args.config, toy=args.toy, seed_override=args.seed)
    validate_config(cfg)
    run_dir = args.run_dir
    p = cfg["ptq"]
    out_csv = os.path.join(run_dir, f"ptq_layers_w{p['weight_bits']}a{p['act_bits']}.csv")
    _refuse_existing(out_csv, args.force, "a PTQ report")

    train_ds, test_ds = make_datasets(cfg)
    spec, graph, params = _load_final(cfg, run_dir, train_ds)
    calib = sample_calibration(train_ds, min(p["calib_size"], len(train_ds)), cfg["data"]["calib_seed"])

    ptq_cfg = PtqConfig(p["weight_bits"], p["act_bits"],
                        first_last_bits=cfg["model"]["first_last_bits"],
                        calib_size=p["calib_size"])
    qm = ptq_calibrate(graph, params, calib, ptq_cfg)
    acc = evaluate(qm, test_ds)
    fp_acc = evaluate((graph, params), test_ds)

    rows = layer_mse_report(qm, test_ds)
    write_layer_report(rows, out_csv,
                       header_note=f"expectation over test split {test_ds.provenance} ({len(test_ds)} samples)")
    record = {
        "event": "ptq",
        "weight_bits": p["weight_bits"],
        "act_bits": p["act_bits"],
        "accuracy": acc,
        "fp_accuracy": fp_acc,
        "calib_checksum": calib.checksum(),
    }
    with open(os.path.join(run_dir, "metrics.jsonl"), "a") as f:
        f.write(json.dumps(record) + "\n")
    print(f"W{p['weight_bits']}A{p['act_bits']} accuracy {acc:.4f} (FP {fp_acc:.4f}); report: {out_csv}")
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = load_config(args.config, toy=args.toy, seed_override=args.seed)
    validate_config(cfg)
    run_dir = args.run_dir
    out_json = os.path.join(run_dir, "probe.json")
    _refuse_existing(out_json, args.force, "a probe report")

    train_ds, _ = make_datasets(cfg)
    spec, graph, params = _load_final(cfg, run_dir, train_ds)
    pr = cfg["probe"]
    subset = sample_calibration(train_ds, min(pr["subset"], len(train_ds)), cfg["data"]["seed"])
    rep = sharpness_report(
        graph, params, subset,
        sigma_grid=pr["sigma_grid"], draws_per_sigma=pr["draws_per_sigma"],
        trace_samples=pr["trace_samples"], seed=cfg["train"]["seed"],
        label_smoothing=cfg["train"]["label_smoothing"],
    )
    with open(out_json, "w") as f:
        f.write(rep.to_json() + "\n")
    print(f"hessian trace {rep.trace:.4g} +- {rep.trace_stderr:.2g}; curve in {out_json}")
    return EXIT_OK


def _arm_train_config(cfg: ResolvedConfig, arm: Tuple[str, bool, bool, bool], seed: int):
    name, wqer, aqer, swa = arm
    tc = cfg.train_config()
    tc.seed = seed
    tc.wqer = wqer
    tc.aqer = aqer
    tc.checkpoint_every = 0
    if not swa:
        tc.swa_start = tc.epochs + 1
    if cfg["ablate"]["dry_run"]:
        tc.epochs, tc.warmup_epochs, tc.ramp_epochs = 1, 0, 1
        tc.swa_start = 1 if swa else 2
    return tc


def _run_arm(packed) -> dict:
    """Train one (arm, seed) cell and evaluate it; used by worker processes."""
    cfg_dict, arm, seed, run_dir, probe_cfg = packed
    cfg = ResolvedConfig(cfg_dict)
    train_ds, test_ds = make_datasets(cfg)
    calib_ds = make_calib(cfg, train_ds)
    spec = make_spec(cfg, train_ds)
    tc = _arm_train_config(cfg, arm, seed)

    arm_dir = os.path.join(run_dir, "arms", f"{arm[0]}_s{seed}")
    os.makedirs(arm_dir, exist_ok=True)
    result = train(tc, spec, train_ds, calib_ds, run_dir=arm_dir)

    row = {"arm": arm[0], "seed": seed,
           "fp_acc": evaluate((result.graph, result.final_params), test_ds)}
    ptq_calib = sample_calibration(train_ds, min(cfg["ptq"]["calib_size"], len(train_ds)),
                                   cfg["data"]["calib_seed"])
    for w_bits, a_bits in cfg["ablate"]["bit_configs"]:
        qm = ptq_calibrate(result.graph, result.final_params, ptq_calib,
                           PtqConfig(w_bits, a_bits, first_last_bits=cfg["model"]["first_last_bits"]))
        row[f"acc_w{w_bits}a{a_bits}"] = evaluate(qm, test_ds)

    subset = sample_calibration(train_ds, min(probe_cfg["subset"], len(train_ds)), cfg["data"]["seed"])
    curve = perturbation_sharpness(result.graph, result.final_params, subset,
                                   sigma_grid=[0.01], draws_per_sigma=probe_cfg["draws_per_sigma"],
                                   seed=cfg["data"]["seed"],
                                   label_smoothing=cfg["train"]["label_smoothing"])
    row["sharpness_dl_001"] = curve[0][1]
    return row


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, toy=args.toy, seed_override=args.seed)
    validate_config(cfg)
    run_dir = args.run_dir
    os.makedirs(run_dir, exist_ok=True)
    summary_csv = os.path.join(run_dir, "ablate_summary.csv")
    runs_csv = os.path.join(run_dir, "ablate_runs.csv")
    _refuse_existing(summary_csv, args.force, "an ablation summary")

    seeds = list(cfg["ablate"]["seeds"])
    started = time.time()
    train_ds, test_ds = make_datasets(cfg)
    data_info = {"train": {"provenance": train_ds.provenance, "checksum": train_ds.checksum()},
                 "test": {"provenance": test_ds.provenance, "checksum": test_ds.checksum()}}
    write_manifest(run_dir, "ablate", cfg, data_info, "running", started)

    jobs = [(cfg.values, arm, seed, run_dir, cfg["probe"]) for arm in ABLATION_ARMS for seed in seeds]
    workers = max(1, int(os.environ.get("DNQ_THREADS", "1")))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_arm, jobs))
    else:
        rows = [_run_arm(j) for j in jobs]

    rows.sort(key=lambda r: ([a[0] for a in ABLATION_ARMS].index(r["arm"]), r["seed"]))
    bit_cols = [f"acc_w{w}a{a}" for w, a in cfg["ablate"]["bit_configs"]]
    with open(runs_csv, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["arm", "seed", "fp_acc"] + bit_cols + ["sharpness_dl_001"])
        writer.writeheader()
        writer.writerows(rows)

    primary = f"acc_w{cfg['ptq']['weight_bits']}a{cfg['ptq']['act_bits']}"
    if primary not in bit_cols:
        primary = bit_cols[0]
    summary_rows = []
    baseline_med = None
    for arm_name, *_ in ABLATION_ARMS:
        arm_rows = [r for r in rows if r["arm"] == arm_name]
        med = {
            "arm": arm_name,
            "fp_acc": statistics.median(r["fp_acc"] for r in arm_rows),
            "sharpness_dl_001": statistics.median(r["sharpness_dl_001"] for r in arm_rows),
        }
        for col in bit_cols:
            med[col] = statistics.median(r[col] for r in arm_rows)
        if arm_name == "baseline":
            baseline_med = med[primary]
        med["delta_vs_baseline"] = med[primary] - baseline_med
        summary_rows.append(med)
    with open(summary_csv, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["arm", "fp_acc"] + bit_cols + ["delta_vs_baseline", "sharpness_dl_001"])
        writer.writeheader()
        writer.writerows(summary_rows)

    write_manifest(run_dir, "ablate", cfg, data_info, "complete", started, time.time())
    for med in summary_rows:
        print(f"{med['arm']:>10}: fp {med['fp_acc']:.4f}  {primary} {med[primary]:.4f}  "
              f"delta {med['delta_vs_baseline']:+.4f}  sharpness {med['sharpness_dl_001']:.3e}")
    print(f"wrote {runs_csv} and {summary_csv}")
    return EXIT_OK


def cmd_report(args) -> int:
    out_dir = os.path.join(args.run_dir, "report")
    _refuse_existing(os.path.join(out_dir, "summary.csv"), args.force, "a report")
    written = report.generate(args.run_dir, out_dir)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dnq", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"dnq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        if config_required:
            p.add_argument("--config", help="INI config file or a run manifest.json")
        p.add_argument("--run-dir", required=True, help="run directory for outputs")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--toy", action="store_true", help="divide all epoch counts by 10")
        p.add_argument("--force", action="store_true", help="overwrite completed outputs")

    p_train = sub.add_parser("train", help="run the two-stage training loop")
    common(p_train)
    p_train.add_argument("--resume", action="store_true", help="continue from the last completed epoch")
    p_train.set_defaults(func=cmd_train)

    p_ptq = sub.add_parser("ptq", help="quantize final.ckpt and evaluate it")
    common(p_ptq)
    p_ptq.set_defaults(func=cmd_ptq)

    p_probe = sub.add_parser("probe", help="loss-landscape sharpness report")
    common(p_probe)
    p_probe.set_defaults(func=cmd_probe)

    p_ablate = sub.add_parser("ablate", help="component ablation grid")
    common(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)

    p_report = sub.add_parser("report", help="render figures and a summary CSV")
    p_report.add_argument("--run-dir", required=True)
    p_report.add_argument("--force", action="store_true")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ConfigValueError, FileExistsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, checkpoint.CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
