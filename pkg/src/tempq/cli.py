"""Command-line entry point: ``tempq <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 runtime/optimization error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
import traceback
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import __version__
from .config import STRATEGIES, ConfigError, ExperimentConfig, load_config, parse_override
from .diffusion import sample
from .maintenance import select_maintenance, temporal_table
from .metrics import error_curves, mismatch_index
from .model import FP, Denoiser
from .pipeline import (
    METRIC_COLUMNS,
    Bundle,
    calibration_set,
    csv_text,
    evaluate,
    json_safe,
    proportion_sweep,
    quantize_model,
    schedule,
    sensitivity,
    train_model,
    write_text,
    write_xy,
)
from .report import build_report

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
EXPERIMENTS = ("sensitivity", "mismatch", "error-curve", "proportion")


class RunManifest:
    """Collects what a command did; written atomically whatever the outcome."""

    def __init__(self, command: str, cfg: ExperimentConfig | None):
        self.command = command
        self.cfg = cfg
        self.artifacts: list[str] = []
        self.metrics: dict = {}
        self.timings: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def timed(self, label: str):
        manifest = self

        class _Timer:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                manifest.timings[label] = round(time.perf_counter() - self.t, 3)

        return _Timer()

    def add(self, *paths) -> None:
        self.artifacts += [str(p) for p in paths]

    def write(self, directory: Path, status: str, error: str | None = None) -> Path:
        self.timings["total"] = round(time.perf_counter() - self._t0, 3)
        doc = {
            "command": self.command,
            "status": status,
            "error": error,
            "code_version": __version__,
            "config_hash": None if self.cfg is None else self.cfg.hash(),
            "config": None if self.cfg is None else self.cfg.to_dict(),
            "artifacts": self.artifacts,
            "metrics": json_safe(self.metrics),
            "timings": self.timings,
        }
        name = "manifest-" + self.command.replace(" ", "-") + ".json"
        return write_text(Path(directory) / name, json.dumps(doc, indent=1, sort_keys=True))


# ------------------------------------------------------------------ commands


def _checkpoint(cfg: ExperimentConfig, args) -> Path:
    return Path(args.checkpoint) if getattr(args, "checkpoint", None) else Path(cfg.output_dir) / "model"


def _load_model(cfg, args) -> Denoiser:
    return Denoiser.load(_checkpoint(cfg, args))


def _bundle_dir(cfg, strategy: str) -> Path:
    return Path(cfg.output_dir) / "bundles" / strategy


def _load_bundle(cfg, args) -> Bundle | None:
    if getattr(args, "bundle", None):
        return Bundle.load(args.bundle)
    strategy = getattr(args, "strategy", None)
    if strategy and strategy != "fp":
        return Bundle.load(_bundle_dir(cfg, strategy))
    return None


def cmd_train(cfg, args, man: RunManifest):
    with man.timed("train"):
        model = train_model(cfg)
    paths = model.save(_checkpoint(cfg, args))
    man.add(*paths)
    man.metrics.update(model.meta["train"])


def cmd_quantize(cfg, args, man: RunManifest):
    model = _load_model(cfg, args)
    strategy = args.strategy or cfg.quant.strategy
    with man.timed("calibration"):
        calib = calibration_set(model, cfg)
    with man.timed(f"quantize:{strategy}"):
        bundle = quantize_model(model, cfg, strategy, calib)
    man.add(*bundle.save(_bundle_dir(cfg, strategy)))
    man.metrics.update(bundle.info)


def _write_eval(cfg, name: str, ev, man: RunManifest) -> Path:
    d = Path(cfg.output_dir) / "eval" / name
    man.add(
        write_text(d / "metrics.csv", csv_text([ev.row], METRIC_COLUMNS)),
        write_text(d / "metrics.json", json.dumps(json_safe(ev.row), indent=1, sort_keys=True)),
        write_text(d / "cells.csv", csv_text(ev.cells)),
        write_text(d / "timesteps.csv", csv_text(ev.timesteps)),
    )
    man.metrics[name] = ev.row
    return d


def cmd_eval(cfg, args, man: RunManifest):
    model = _load_model(cfg, args)
    bundle = _load_bundle(cfg, args)
    with man.timed("eval"):
        ev = evaluate(model, cfg, bundle)
    _write_eval(cfg, ev.row["strategy"], ev, man)


def cmd_sample(cfg, args, man: RunManifest):
    model = _load_model(cfg, args)
    bundle = _load_bundle(cfg, args)
    rt = FP if bundle is None else bundle.runtime(model)
    count = args.count or cfg.eval.samples
    pts = sample(model, count, schedule(cfg), cfg.eval.sampler, cfg.eval.ddim_steps, seed=cfg.seed, rt=rt)
    name = "fp" if bundle is None else bundle.strategy
    rows = [{"x": float(a), "y": float(b)} for a, b in pts]
    man.add(write_text(Path(cfg.output_dir) / "samples" / f"{name}.csv", csv_text(rows)))


def cmd_analyze(cfg, args, man: RunManifest):
    model = _load_model(cfg, args)
    out = Path(cfg.output_dir) / "analysis"
    exp = args.experiment
    if exp == "sensitivity":
        with man.timed("sensitivity"):
            rows = sensitivity(model, cfg)
        man.add(write_text(out / "sensitivity.csv", csv_text(rows)))
        for target in ("temporal", "non-temporal"):
            sel = [r for r in rows if r["target"] == target]
            man.add(write_xy(out / f"fig2_{target}.dat", [r["lambda"] for r in sel], [r["mmd2"] for r in sel], ("lambda", "mmd2")))
        man.metrics["sensitivity"] = rows
        return
    if exp == "proportion":
        bundle = Bundle.load(args.bundle) if args.bundle else Bundle.load(_bundle_dir(cfg, "ds"))
        with man.timed("proportion"):
            rows = proportion_sweep(model, cfg, bundle, cfg.analysis.proportions)
        man.add(write_text(out / "proportion.csv", csv_text(rows)))
        for key in ("mmd2", "sqnr_db"):
            man.add(write_xy(out / f"fig11_{key}.dat", [r["proportion"] for r in rows], [r[key] for r in rows], ("proportion", key)))
        man.metrics["proportion"] = rows
        return
    bundle = _load_bundle(cfg, args)
    if bundle is None:
        raise ConfigError(f"--experiment {exp} needs --bundle or --strategy")
    name = bundle.strategy
    if exp == "mismatch":
        delta = mismatch_index(temporal_table(model), temporal_table(model, bundle.runtime(model)))
        cells = [{"t": t + 1, "i": i, "delta": int(delta[t, i])} for t in range(model.T) for i in range(model.n)]
        man.add(write_text(out / f"mismatch_{name}.csv", csv_text(cells)))
        block = cfg.analysis.mismatch_block % model.n
        ts = np.arange(1, model.T + 1)
        man.add(write_xy(out / f"fig3_right_{name}.dat", ts, ts + delta[:, block], ("t", "t_plus_delta")))
        man.metrics["mean_abs_delta"] = float(np.mean(np.abs(delta)))
        return
    # error-curve
    rows = error_curves(model, schedule(cfg), bundle.runtime(model), cfg.eval.trajectory_samples, seed=cfg.seed)
    rows.sort(key=lambda r: r["t"])
    man.add(write_text(out / f"error_curve_{name}.csv", csv_text(rows)))
    for key, label in (("E_temporal", "temporal"), ("E_nontemporal", "nontemporal")):
        man.add(write_xy(out / f"fig3_left_{name}_{label}.dat", [r["t"] for r in rows], [r[key] for r in rows], ("t", key)))


def _read_loss_table(path: str, column: str) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read loss table {path}: {exc}") from exc
    if not rows or not {"t", "i", column} <= set(rows[0]):
        raise ConfigError(f"{path}: needs columns t, i, {column}")
    T = max(int(r["t"]) for r in rows)
    n = max(int(r["i"]) for r in rows) + 1
    table = np.full((T, n), np.nan)
    for r in rows:
        table[int(r["t"]) - 1, int(r["i"])] = float(r[column])
    if np.any(np.isnan(table)):
        raise ConfigError(f"{path}: loss table is incomplete")
    return table


def cmd_select(cfg, args, man: RunManifest):
    tm = _read_loss_table(args.loss_tm, args.column)
    cm = _read_loss_table(args.loss_cm, args.column)
    mask = select_maintenance(tm, cm)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "mask.json"
    man.add(write_text(out, mask.to_json()))
    man.metrics["selection"] = mask.counts()


def cmd_report(cfg, args, man: RunManifest):
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "report"
    summary = build_report([Path(d) for d in args.runs], out)
    man.add(summary["table"], *summary["svg"])
    man.metrics["rows"] = summary["rows"]


def cmd_pipeline(cfg, args, man: RunManifest):
    """train -> quantize (every strategy) -> eval -> analyses, in one output directory."""
    root = Path(cfg.output_dir)
    with man.timed("train"):
        model = train_model(cfg)
    man.add(*model.save(root / "model"))
    with man.timed("calibration"):
        calib = calibration_set(model, cfg)
    rows = []
    with man.timed("eval:fp"):
        ev = evaluate(model, cfg, None)
    _write_eval(cfg, "fp", ev, man)
    rows.append(ev.row)
    bundles = {}
    for strategy in STRATEGIES:
        with man.timed(f"quantize:{strategy}"):
            bundles[strategy] = quantize_model(model, cfg, strategy, calib)
        man.add(*bundles[strategy].save(_bundle_dir(cfg, strategy)))
        with man.timed(f"eval:{strategy}"):
            ev = evaluate(model, cfg, bundles[strategy])
        _write_eval(cfg, strategy, ev, man)
        rows.append(ev.row)
    man.add(write_text(root / "metrics.csv", csv_text(rows, METRIC_COLUMNS)))
    ns = argparse.Namespace(checkpoint=str(root / "model"), bundle=None)
    for exp, strategies in (("sensitivity", [None]), ("mismatch", ["baseline", "tm"]), ("error-curve", ["baseline", "ds"]), ("proportion", [None])):
        for s in strategies:
            ns.experiment, ns.strategy = exp, s
            with man.timed(f"analyze:{exp}" + (f":{s}" if s else "")):
                cmd_analyze(cfg, ns, man)


COMMANDS = {
    "train": cmd_train,
    "quantize": cmd_quantize,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "analyze": cmd_analyze,
    "select": cmd_select,
    "report": cmd_report,
    "pipeline": cmd_pipeline,
}


# ---------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field, e.g. quant.w_bits=8")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--output-dir", help="run directory")
    common.add_argument("--w-bits", type=int)
    common.add_argument("--a-bits", type=int)

    p = argparse.ArgumentParser(prog="tempq", description="Temporal-feature-aware post-training quantization of a toy diffusion model.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="train the full-precision denoiser")
    s.add_argument("--checkpoint", help="checkpoint path prefix (default: <output-dir>/model)")

    s = sub.add_parser("quantize", parents=[common], help="build a quantized-model bundle")
    s.add_argument("--strategy", choices=STRATEGIES)
    s.add_argument("--checkpoint")

    for name, helptext in (("eval", "evaluate a bundle (or the full-precision model)"), ("sample", "generate points")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--checkpoint")
        s.add_argument("--bundle", help="bundle directory")
        s.add_argument("--strategy", choices=STRATEGIES + ("fp",), help="bundle under <output-dir>/bundles/")
        if name == "sample":
            s.add_argument("--count", type=int)

    s = sub.add_parser("analyze", parents=[common], help="disturbance experiments")
    s.add_argument("--experiment", required=True, choices=EXPERIMENTS)
    s.add_argument("--checkpoint")
    s.add_argument("--bundle")
    s.add_argument("--strategy", choices=STRATEGIES)

    s = sub.add_parser("select", parents=[common], help="selection mask from two per-cell loss tables")
    s.add_argument("--loss-tm", required=True, help="CSV with t, i and a loss column (TIB path)")
    s.add_argument("--loss-cm", required=True, help="CSV with t, i and a loss column (cache path)")
    s.add_argument("--column", default="mse")
    s.add_argument("--out")

    s = sub.add_parser("report", parents=[common], help="merge run directories")
    s.add_argument("runs", nargs="+")
    s.add_argument("--out")

    sub.add_parser("pipeline", parents=[common], help="train, quantize with every strategy, evaluate and analyze")
    return p


def config_from_args(args) -> ExperimentConfig:
    overrides = dict(parse_override(x) for x in args.set)
    for flag, key in (("seed", "seed"), ("output_dir", "output_dir"), ("w_bits", "quant.w_bits"), ("a_bits", "quant.a_bits")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"tempq: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    label = args.command
    if args.command == "quantize":
        label += " " + (args.strategy or cfg.quant.strategy)
    if args.command == "analyze":
        label += " " + args.experiment
    man = RunManifest(label, cfg)
    try:
        with FileLock(str(out / ".lock"), timeout=0):
            try:
                COMMANDS[args.command](cfg, args, man)
            except ConfigError as exc:
                man.write(out, "failed", f"config error: {exc}")
                print(f"tempq: config error: {exc}", file=sys.stderr)
                return EXIT_CONFIG
            except Exception as exc:  # noqa: BLE001 - every failure is reported with exit code 3
                man.write(out, "failed", f"{type(exc).__name__}: {exc}")
                print(f"tempq: error: {type(exc).__name__}: {exc}", file=sys.stderr)
                if args.command == "pipeline":
                    traceback.print_exc()
                return EXIT_RUNTIME
            man.write(out, "ok")
    except Timeout:
        print(f"tempq: error: another process holds the lock on {out}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
