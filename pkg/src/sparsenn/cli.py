"""Command-line harness: ``sparsenn {train,eval,simulate,sweep,report}``.

Every command takes ``--config`` plus optional ``--seed``, ``--mode`` and
``--out`` overrides and writes JSON/CSV files and a manifest into the output
directory. Exit codes: 0 success, 2 configuration error, 3 runtime failure
(divergence, deadlock, corrupt files), 4 hardware capacity exceeded.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .arch import CapacityError, validate_capacity
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, data_digest, load_config, load_datasets
from .data import DataError
from .model import Mode, NetworkSpec, forward_fx_golden, quantize_network
from .sim import (
    COMPARISON_CSV_HEADER,
    PHASE_CSV_HEADER,
    SimulationDeadlock,
    comparison_rows,
    energy_report,
    merge_reports,
    phase_rows,
    run_network,
    write_csv,
)
from .train import DivergenceError, EpochStats, PredictorMode, SVDConvergenceError, evaluate, init_params, train

log = logging.getLogger("sparsenn")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CAPACITY = 0, 2, 3, 4

CHECKPOINT_NAME = "model.ckpt"


def train_csv_header(num_layers: int) -> List[str]:
    """Columns of ``train_log.csv``: one sparsity column per hidden layer."""
    return ["epoch", "loss", "ter"] + [f"rho_layer{l}" for l in range(num_layers - 1)]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(cfg: ExperimentConfig, command: str, out: Path) -> None:
    """Everything needed to reproduce the run; deliberately free of timestamps."""
    _write_json(out / f"manifest_{command}.json", {
        "command": command,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "data_sha256": data_digest(cfg),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "sparsenn": __version__,
        },
    })


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


# -- commands ------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig) -> dict:
    out = _prepare_out(cfg)
    train_ds, test_ds = load_datasets(cfg)
    spec = cfg.network
    if cfg.train.predictor_mode == PredictorMode.NONE:
        spec = NetworkSpec(spec.layer_sizes)
    params = init_params(spec, cfg.seed)
    header = train_csv_header(spec.num_layers)
    rows: List[list] = []

    def on_epoch(s: EpochStats) -> None:
        rows.append([s.epoch, repr(float(s.loss)), repr(float(s.ter))]
                    + [_fmt(s.sparsity[l]) for l in range(spec.num_layers - 1)])

    try:
        report = train(params, train_ds, cfg.train, test_ds, on_epoch)
    finally:
        write_csv(out / "train_log.csv", header, rows)
    save_checkpoint(out / CHECKPOINT_NAME, params,
                    metadata={"config_hash": cfg.hash(), "predictor_mode": cfg.train.predictor_mode.value})
    result = report.to_dict()
    _write_json(out / "train_report.json", result)
    write_manifest(cfg, "train", out)
    return result


def _load_params(cfg: ExperimentConfig, checkpoint: Optional[str]):
    path = Path(checkpoint) if checkpoint else cfg.out_dir / CHECKPOINT_NAME
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path} (run `train` first or pass --checkpoint)")
    params, _, meta = load_checkpoint(path)
    if params.spec.layer_sizes != cfg.network.layer_sizes:
        raise ConfigError(f"checkpoint layer sizes {params.spec.layer_sizes} do not match "
                          f"config {cfg.network.layer_sizes}")
    return params, meta


def cmd_eval(cfg: ExperimentConfig, checkpoint: Optional[str] = None) -> dict:
    out = _prepare_out(cfg)
    params, _ = _load_params(cfg, checkpoint)
    _, test_ds = load_datasets(cfg)
    mode = cfg.train.predictor_mode if params.spec.predictor_layers else PredictorMode.NONE
    ev = evaluate(params, test_ds, mode)
    result = {"ter": ev.ter, "sparsity": ev.sparsity, "mode": mode.value, "samples": len(test_ds)}
    _write_json(out / "eval.json", result)
    write_manifest(cfg, "eval", out)
    return result


def cmd_simulate(cfg: ExperimentConfig, checkpoint: Optional[str] = None,
                 modes: Optional[List[str]] = None) -> dict:
    """Quantize the checkpoint, simulate each mode over test samples, compare."""
    out = _prepare_out(cfg)
    params, _ = _load_params(cfg, checkpoint)
    train_ds, test_ds = load_datasets(cfg)
    modes = modes or cfg.simulate.modes
    qnet = quantize_network(params, train_ds.images[:cfg.simulate.calibration_samples])
    validate_capacity(qnet, cfg.arch)
    n = min(cfg.simulate.samples, len(test_ds))
    merged = {}
    summary = {"samples": n, "modes": {}}
    phase_table: List[list] = []
    for mode in modes:
        reports, mismatches = [], 0
        for i in range(n):
            codes = qnet.quantize_input(test_ds.images[i])
            rep = run_network(qnet, codes, cfg.arch, mode)
            golden = forward_fx_golden(qnet, codes, mode)
            if not all(np.array_equal(a, b) for a, b in zip(rep.outputs, golden.activations[1:])):
                mismatches += 1
            reports.append(rep)
        m = merge_reports(reports)
        merged[mode] = m
        e = energy_report(m, cfg.energy)
        summary["modes"][mode] = {
            "total_cycles": m.total_cycles,
            "energy_uj": e.energy_uj,
            "power_mw": e.power_mw,
            "golden_mismatches": mismatches,
        }
        _write_json(out / f"sim_{mode}.json", m.to_dict())
        phase_table += phase_rows(m, cfg.energy)
    write_csv(out / "phases.csv", PHASE_CSV_HEADER, phase_table)
    if Mode.UV_ON.value in merged and Mode.UV_OFF.value in merged:
        rows = comparison_rows(merged[Mode.UV_OFF.value], merged[Mode.UV_ON.value], cfg.energy)
        write_csv(out / "comparison.csv", COMPARISON_CSV_HEADER, rows)
        summary["comparison"] = [dict(zip(COMPARISON_CSV_HEADER, r)) for r in rows]
    _write_json(out / "simulate.json", summary)
    write_manifest(cfg, "simulate", out)
    return summary


def _sweep_one(args) -> dict:
    cfg, point, i = args
    sub = cfg.with_params(point)
    sub.out = str(cfg.out_dir / "sweep" / f"run_{i:03d}")
    rep = cmd_train(sub)
    last = rep["epochs"][-1] if rep["epochs"] else {"loss": None, "ter": None, "sparsity": []}
    return {"point": point, "loss": last["loss"], "ter": last["ter"], "sparsity": last["sparsity"]}


def cmd_sweep(cfg: ExperimentConfig, jobs: int = 1) -> List[dict]:
    """Train once per point of the cartesian sweep grid; each run is isolated."""
    if not cfg.sweep:
        raise ConfigError("sweep needs a [sweep] table")
    out = _prepare_out(cfg)
    points = cfg.sweep_points()
    tasks = [(cfg, p, i) for i, p in enumerate(points)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_one, tasks))
    else:
        results = [_sweep_one(t) for t in tasks]
    keys = sorted(cfg.sweep)
    hidden = cfg.network.num_layers - 1
    header = ["run"] + keys + ["loss", "ter"] + [f"rho_layer{l}" for l in range(hidden)]
    rows = []
    for i, r in enumerate(results):
        rho = (r["sparsity"] or [None] * hidden)[:hidden]
        rows.append([i] + [r["point"][k] for k in keys] + [_fmt(r["loss"]), _fmt(r["ter"])]
                    + [_fmt(v) for v in rho])
    write_csv(out / "sweep.csv", header, rows)
    write_manifest(cfg, "sweep", out)
    return results


def cmd_report(cfg: ExperimentConfig) -> dict:
    """Collect what earlier commands left in the output directory into one summary."""
    out = cfg.out_dir
    if not out.exists():
        raise ConfigError(f"output directory {out} does not exist")
    summary = {}
    tr = out / "train_report.json"
    if tr.exists():
        epochs = json.loads(tr.read_text())["epochs"]
        if epochs:
            summary["final_epoch"] = epochs[-1]
    for name in ("eval.json", "simulate.json"):
        p = out / name
        if p.exists():
            summary[name.split(".")[0]] = json.loads(p.read_text())
    sw = out / "sweep.csv"
    if sw.exists():
        with open(sw, newline="") as fh:
            summary["sweep"] = list(csv.DictReader(fh))
    if not summary:
        raise ConfigError(f"nothing to report in {out}")
    _write_json(out / "summary.json", summary)
    return summary


def _print_summary(command: str, result) -> None:
    if command == "train":
        last = result["epochs"][-1] if result["epochs"] else None
        if last:
            print(f"epoch {last['epoch']}: loss {last['loss']:.4f}  TER {last['ter']:.2f}%  "
                  f"sparsity {last['sparsity']}")
    elif command == "eval":
        print(f"TER {result['ter']:.2f}%  sparsity {result['sparsity']}")
    elif command == "simulate":
        for mode, s in result["modes"].items():
            print(f"{mode}: {s['total_cycles']} cycles, {s['energy_uj']:.4f} uJ, {s['power_mw']:.2f} mW, "
                  f"golden mismatches {s['golden_mismatches']}")
        for row in result.get("comparison", []):
            print(f"layer {row['layer']}: cycle reduction {row['cycle_reduction']:.3f}, "
                  f"power ratio {row['power_ratio']}")
    elif command == "sweep":
        for r in result:
            print(f"{r['point']}: TER {r['ter']}  sparsity {r['sparsity']}")
    else:
        print(json.dumps(result, indent=2, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsenn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("train", "train a network"), ("eval", "evaluate a checkpoint"),
                        ("simulate", "simulate a checkpoint on the accelerator model"),
                        ("sweep", "train over a parameter grid"), ("report", "summarize an output directory")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="TOML experiment file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--mode", help="train/eval/sweep: end_to_end, svd_static or none; "
                                      "simulate: uv_on, uv_off or both")
        if name in ("eval", "simulate"):
            p.add_argument("--checkpoint", help="defaults to <out>/model.ckpt")
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=1, help="concurrent runs")
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        sim_modes = None
        pmode = None
        if args.mode:
            if args.command == "simulate":
                if args.mode == "both":
                    sim_modes = [Mode.UV_OFF.value, Mode.UV_ON.value]
                else:
                    sim_modes = [Mode(args.mode).value]
            else:
                pmode = PredictorMode(args.mode).value
        cfg = cfg.with_overrides(seed=args.seed, predictor_mode=pmode, out=args.out)
        if args.command == "train":
            result = cmd_train(cfg)
        elif args.command == "eval":
            result = cmd_eval(cfg, args.checkpoint)
        elif args.command == "simulate":
            result = cmd_simulate(cfg, args.checkpoint, sim_modes)
        elif args.command == "sweep":
            result = cmd_sweep(cfg, args.jobs)
        else:
            result = cmd_report(cfg)
    except CapacityError as exc:
        print(f"error: capacity exceeded ({exc.limit}): {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except (DivergenceError, SVDConvergenceError, SimulationDeadlock, CheckpointError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        # ConfigError, plus enum lookups for --mode
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _print_summary(args.command, result)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
