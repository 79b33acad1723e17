"""Strategy pipelines, quantized-model bundles and evaluation."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import STRATEGIES, ConfigError, ExperimentConfig
from .diffusion import NoiseSchedule, make_dataset, make_schedule, sample, train
from .maintenance import (
    CACHE,
    TIB,
    AssemblyError,
    CalibSet,
    QuantizedDenoiser,
    SelectionMask,
    TemporalFeatureCache,
    assemble_quantized_model,
    baseline_block_reconstruct,
    build_tib,
    cache_maintain,
    calibrate_block_acts,
    fsc_calibrate,
    init_qset,
    make_calibration_set,
    select_maintenance,
    shared_calibrate,
    temporal_loss,
    temporal_table,
    tiar_reconstruct,
)
from .metrics import cosine_rows, error_curves, mismatch_index, mmd2, sensitivity_sweep, sqnr, temporal_error
from .model import FP, Architecture, Denoiser, Runtime
from .quant import QuantParamSet

METRIC_COLUMNS = (
    "strategy", "w_bits", "a_bits", "seed", "mmd2", "sqnr_db", "mean_E_t", "mean_L_temporal", "mean_abs_delta",
)
FP_BITS = 64


def architecture(cfg: ExperimentConfig) -> Architecture:
    m = cfg.model
    return Architecture(m.data_dim, m.hidden, m.temb_dim, m.n_blocks, m.T, m.base)


def schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    return make_schedule(cfg.model.T, cfg.schedule.beta_start, cfg.schedule.beta_end)


def train_model(cfg: ExperimentConfig) -> Denoiser:
    data = make_dataset(cfg.dataset.name, cfg.dataset.count, cfg.dataset.seed)
    model = Denoiser(architecture(cfg), seed=cfg.seed)
    model = train(model, data, schedule(cfg), cfg.train.steps, cfg.train.lr, cfg.seed, cfg.train.batch_size)
    model.meta["config_hash"] = cfg.hash()
    return model


def calibration_set(model: Denoiser, cfg: ExperimentConfig) -> CalibSet:
    # separate noise stream from evaluation sampling
    return make_calibration_set(
        model, schedule(cfg), cfg.calib.trajectories, cfg.calib.stride, seed=_calib_seed(cfg.seed)
    )


def _calib_seed(seed: int) -> int:
    return 1_000_003 + seed


# ------------------------------------------------------------------ bundles


@dataclass
class Bundle:
    strategy: str
    qset: QuantParamSet
    cache: TemporalFeatureCache | None = None
    mask: SelectionMask | None = None
    w_bits: int = 0
    a_bits: int = 0
    info: dict = field(default_factory=dict)

    def runtime(self, model: Denoiser) -> QuantizedDenoiser:
        return assemble_quantized_model(model, self.qset, self.cache, self.mask)

    def files(self) -> list[str]:
        out = ["bundle.json", "qparams.json"]
        if self.cache is not None:
            out += ["cache.json", "cache.bin"]
        if self.mask is not None:
            out.append("mask.json")
        return out

    def save(self, directory) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        _atomic_text(d / "qparams.json", self.qset.to_json())
        if self.cache is not None:
            self.cache.save(d / "cache")
        if self.mask is not None:
            _atomic_text(d / "mask.json", self.mask.to_json())
        meta = {
            "strategy": self.strategy,
            "w_bits": self.w_bits,
            "a_bits": self.a_bits,
            "files": self.files(),
            "info": self.info,
        }
        _atomic_text(d / "bundle.json", json.dumps(meta, indent=1, sort_keys=True))
        return [d / f for f in self.files()]

    @classmethod
    def load(cls, directory) -> "Bundle":
        d = Path(directory)
        try:
            meta = json.loads((d / "bundle.json").read_text())
            qset = QuantParamSet.from_json((d / "qparams.json").read_text())
        except OSError as exc:
            raise AssemblyError(f"bundle file missing: {exc.filename}") from exc
        cache = mask = None
        if "cache.json" in meta["files"]:
            cache = TemporalFeatureCache.load(d / "cache")
        if "mask.json" in meta["files"]:
            path = d / "mask.json"
            if not path.exists():
                raise AssemblyError(f"bundle file missing: {path}")
            mask = SelectionMask.from_json(path.read_text())
        b = cls(meta["strategy"], qset, cache, mask, meta["w_bits"], meta["a_bits"], meta.get("info", {}))
        b.check()
        return b

    def check(self) -> None:
        """Strategy/content consistency."""
        has_tib = any(isinstance(v, list) for v in self.qset.activations.values())
        s = self.strategy
        if s == "cm" and (self.cache is None or has_tib):
            raise AssemblyError("cm bundle needs a cache and no per-timestep TIB tables")
        if s == "ds" and (self.cache is None or self.mask is None or not has_tib):
            raise AssemblyError("ds bundle needs per-timestep tables, a cache and a selection mask")
        if s == "tm" and (self.cache is not None or not has_tib):
            raise AssemblyError("tm bundle needs per-timestep tables and no cache")
        if s in ("baseline", "freeze") and (self.cache is not None or self.mask is not None):
            raise AssemblyError(f"{s} bundle must not carry a cache or mask")


def quantize_model(model: Denoiser, cfg: ExperimentConfig, strategy: str | None = None, calib: CalibSet | None = None) -> Bundle:
    """Run one strategy end to end and return its bundle.

    Every strategy finishes the same way: block-wise reconstruction of the
    residual-block weights (seeing the strategy's temporal features), then
    min-max calibration of the residual-block activation sites.
    """
    strategy = strategy or cfg.quant.strategy
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    q, o = cfg.quant, cfg.optim
    calib = calibration_set(model, cfg) if calib is None else calib
    tib = build_tib(model)
    qset = init_qset(model, q.w_bits, q.weight_estimator, q.symmetric_weights)
    ts_calib = calib.timesteps()
    cache = mask = None
    info: dict = {}

    if strategy == "baseline":
        hist: list = []
        qset = baseline_block_reconstruct(
            model, qset, calib, o.recon_iters, o.recon_lr, cfg.seed,
            include_embedding=True, batch_size=o.recon_batch, history=hist,
        )
        info["recon"] = [list(h) for h in hist]
        qset = shared_calibrate(model, tib, qset, q.a_bits, ts_calib, q.act_estimator)
    else:
        if strategy == "freeze":
            qset = shared_calibrate(model, tib, qset, q.a_bits, ts_calib, q.act_estimator)
        if strategy in ("tm", "ds"):
            hist = []
            qset = tiar_reconstruct(model, tib, qset, o.tiar_iters, o.tiar_lr, cfg.seed, history=hist)
            info["tiar"] = dict(hist)
            qset = fsc_calibrate(model, tib, qset, q.a_bits, q.act_estimator)
        if strategy in ("cm", "ds"):
            fp = temporal_table(model)
            cache = cache_maintain(fp, q.cache_bits, o.cache_iters, o.cache_lr, cfg.seed)
        if strategy == "cm":
            for site in tib.weight_sites:
                qset.weights.pop(site)
        if strategy == "ds":
            fp = cache.fp
            tm_feats = temporal_table(model, QuantizedDenoiser(model, qset))
            mask = select_maintenance(
                temporal_loss(fp, tm_feats, q.selection_loss),
                temporal_loss(fp, cache.dequantized(), q.selection_loss),
            )
            info["selection"] = mask.counts()
        path = QuantizedDenoiser(model, qset, cache, mask)
        hist = []
        qset = baseline_block_reconstruct(
            model, qset, calib, o.recon_iters, o.recon_lr, cfg.seed,
            include_embedding=False, temporal=temporal_table(model, path), batch_size=o.recon_batch, history=hist,
        )
        info["recon"] = [list(h) for h in hist]
    qset = calibrate_block_acts(model, qset, calib, q.a_bits, cache, mask, q.act_estimator)
    bundle = Bundle(strategy, qset, cache, mask, q.w_bits, q.a_bits, info)
    bundle.check()
    bundle.runtime(model)  # raises if anything is missing
    return bundle


# --------------------------------------------------------------- evaluation


@dataclass
class Evaluation:
    row: dict
    cells: list[dict]
    timesteps: list[dict]


def reference_points(cfg: ExperimentConfig) -> np.ndarray:
    """Fresh draws from the data distribution (not the training draw) for MMD^2."""
    return make_dataset(cfg.dataset.name, cfg.eval.samples, cfg.dataset.seed + 1).points


def evaluate(model: Denoiser, cfg: ExperimentConfig, bundle: Bundle | None = None, reference: np.ndarray | None = None) -> Evaluation:
    """Metrics of a bundle (or of the full-precision model when ``bundle`` is None).

    MMD^2 is measured against ``reference`` (default :func:`reference_points`).
    """
    sched = schedule(cfg)
    rt: Runtime = FP if bundle is None else bundle.runtime(model)
    ev = cfg.eval
    if reference is None:
        reference = reference_points(cfg)
    pts = sample(model, ev.samples, sched, ev.sampler, ev.ddim_steps, seed=cfg.seed, rt=rt)

    fp_tab = temporal_table(model)
    q_tab = temporal_table(model, rt)
    e_t, mse = temporal_error(fp_tab, q_tab)
    delta = mismatch_index(fp_tab, q_tab)
    cos_cells = cosine_rows(fp_tab, q_tab)

    # eps outputs of both models along one full-precision trajectory
    _, traj = sample(model, ev.trajectory_samples, sched, "ddpm", seed=cfg.seed, return_trajectory=True)
    ref, out = [], []
    for t in range(sched.T, 0, -1):
        ref.append(model.eps(traj[t], t))
        out.append(model.eps(traj[t], t, rt))
    curves = error_curves(model, sched, rt, ev.trajectory_samples, seed=cfg.seed)

    row = {
        "strategy": "fp" if bundle is None else bundle.strategy,
        "w_bits": FP_BITS if bundle is None else bundle.w_bits,
        "a_bits": FP_BITS if bundle is None else bundle.a_bits,
        "seed": cfg.seed,
        "mmd2": mmd2(pts, reference),
        "sqnr_db": sqnr(ref, out),
        "mean_E_t": float(np.mean(e_t)),
        "mean_L_temporal": float(np.mean(mse)),
        "mean_abs_delta": float(np.mean(np.abs(delta))),
    }
    cells = []
    for t in range(1, model.T + 1):
        for i in range(model.n):
            cells.append({
                "t": t,
                "i": i,
                "mse": float(mse[t - 1, i]),
                "cosine": float(cos_cells[t - 1, i]),
                "delta": int(delta[t - 1, i]),
                "path": "fp" if bundle is None else rt.choice(t, i),
            })
    return Evaluation(row, cells, curves)


def proportion_sweep(model: Denoiser, cfg: ExperimentConfig, bundle: Bundle, proportions) -> list[dict]:
    """From all-cache to all-TIB: switch the lowest-tau cells to TIB first.

    ``bundle`` must be a ds bundle (it carries both paths); its
    residual-block params are reused for every point.
    """
    if bundle.mask is None or bundle.cache is None:
        raise AssemblyError("proportion sweep needs a ds bundle")
    sched = schedule(cfg)
    ev = cfg.eval
    tau = bundle.mask.tau
    order = np.argsort(tau, axis=None, kind="stable")
    reference = reference_points(cfg)
    _, traj = sample(model, ev.trajectory_samples, sched, "ddpm", seed=cfg.seed, return_trajectory=True)
    ref = [model.eps(traj[t], t) for t in range(sched.T, 0, -1)]
    fp_tab = temporal_table(model)
    rows = []
    for p in proportions:
        k = int(round(p * tau.size))
        choice = np.full(tau.shape, CACHE, dtype=object)
        choice.flat[order[:k]] = TIB
        mask = SelectionMask(tau, choice, bundle.mask.loss_tm, bundle.mask.loss_cm)
        rt = assemble_quantized_model(model, bundle.qset, bundle.cache, mask)
        pts = sample(model, ev.samples, sched, ev.sampler, ev.ddim_steps, seed=cfg.seed, rt=rt)
        out = [model.eps(traj[t], t, rt) for t in range(sched.T, 0, -1)]
        _, mse = temporal_error(fp_tab, temporal_table(model, rt))
        rows.append({
            "proportion": float(p),
            "tib_cells": k,
            "mmd2": mmd2(pts, reference),
            "sqnr_db": sqnr(ref, out),
            "mean_L_temporal": float(mse.mean()),
        })
    return rows


def sensitivity(model: Denoiser, cfg: ExperimentConfig) -> list[dict]:
    sched = schedule(cfg)
    a = cfg.analysis
    rows = []
    for target in ("temporal", "non-temporal"):
        rows += sensitivity_sweep(model, sched, target, a.lambdas, a.sweep_samples, cfg.seed)
    return rows


# ------------------------------------------------------------------ output


def format_value(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def csv_text(rows: list[dict], columns=None) -> str:
    columns = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([format_value(r[c]) for c in columns])
    return buf.getvalue()


def json_safe(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_text(path, text)
    return path


def write_xy(path, xs, ys, header: tuple[str, str]) -> Path:
    """Two-column whitespace-separated plot data with a ``#`` header."""
    lines = [f"# {header[0]} {header[1]}"]
    lines += [f"{format_value(float(x))} {format_value(float(y))}" for x, y in zip(xs, ys)]
    return write_text(path, "\n".join(lines) + "\n")


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
