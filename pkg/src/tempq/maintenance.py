"""Keeping temporal features intact under quantization.

Three ways to get the per-block temporal features X_{t,i} = g_i(h(t)) of a
quantized denoiser:

* TIB path: quantize the time embed and embedding layers as one unit,
  reconstruct their weight params against the full-precision features
  (:func:`tiar_reconstruct`) and give every activation site inside the unit
  one param pair per timestep (:func:`fsc_calibrate`).
* Cache path: precompute all T x n features and store them as LSQ-tuned
  8-bit codes (:func:`cache_maintain`).
* Per-cell selection between the two by error ratio
  (:func:`select_maintenance`).

:func:`baseline_block_reconstruct` is the block-wise reconstruction these
are compared against.  :func:`assemble_quantized_model` glues everything
into a runtime usable by the samplers.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .diffusion import NoiseSchedule, capture_temporal_features, sample
from .model import FP, Denoiser
from .quant import (
    SCALE_FLOOR,
    Adam,
    OptimizationError,
    QuantConfigError,
    QuantParams,
    QuantParamSet,
    estimate_range,
    lsq_grad_scale,
    lsq_optimize,
    params_from_range,
    quantize,
)
from .runtime import CaptureRuntime, QuantRuntime

TIB, CACHE = "TIB", "CACHE"
SELECTION_LOSSES = ("mse", "kl", "ce")


class AssemblyError(RuntimeError):
    pass


# ---------------------------------------------------------------- sites


def quantized_layers(model: Denoiser) -> list[str]:
    """Linear layers that get quantized; stem and head stay full precision."""
    return [name for name in model.linear_layers() if name not in ("stem", "head")]


def weight_sites(model: Denoiser) -> list[str]:
    return [f"{name}/w" for name in quantized_layers(model)]


def act_sites(model: Denoiser) -> list[str]:
    """Every quantized activation site, TIB sites first, in forward order."""
    sites = list(model.temporal_act_sites())
    for i in range(model.n):
        sites += model.block_act_sites(i)
    return sites


@dataclass(frozen=True)
class TemporalInformationBlock:
    """The time embed plus all embedding layers, as one quantization unit."""

    model: Denoiser
    layers: tuple[str, ...]
    weight_sites: tuple[str, ...]
    act_sites: tuple[str, ...]

    def __contains__(self, site: str) -> bool:
        return site in self.weight_sites or site in self.act_sites


def build_tib(model: Denoiser) -> TemporalInformationBlock:
    layers = tuple(model.temporal_layers())
    return TemporalInformationBlock(
        model, layers, tuple(f"{name}/w" for name in layers), tuple(model.temporal_act_sites())
    )


def init_weight_params(
    model: Denoiser, b: int, method: str = "min-max", symmetric: bool = False, layers=None
) -> dict[str, QuantParams]:
    """Per-output-channel params for each quantized weight."""
    layers = quantized_layers(model) if layers is None else layers
    return {
        f"{name}/w": estimate_range(model.params[f"{name}/w"], method, b, axis=0, symmetric=symmetric)
        for name in layers
    }


def init_qset(model: Denoiser, w_bits: int, method: str = "min-max", symmetric: bool = False) -> QuantParamSet:
    return QuantParamSet(init_weight_params(model, w_bits, method, symmetric), {}, model.T)


# ------------------------------------------------------------ runtime glue


class QuantizedDenoiser(QuantRuntime):
    """Runtime that sources temporal features per (t, i) from the TIB path or a cache.

    Temporal features depend only on t, so they are computed once per
    timestep (a single-row pass) and reused.  ``self.model`` is the
    underlying full-precision network.
    """

    def __init__(
        self,
        model: Denoiser,
        qset: QuantParamSet,
        cache: "TemporalFeatureCache | None" = None,
        mask: "SelectionMask | None" = None,
        quantize_acts: bool = True,
        capture=None,
        hooks=None,
    ):
        super().__init__(qset, quantize_acts=quantize_acts, capture=capture, hooks=hooks)
        self.model = model
        self.cache = cache
        self.mask = mask
        self._cached = None if cache is None else cache.dequantized()
        self._memo: dict[int, list[np.ndarray]] = {}

    def choice(self, t: int, i: int) -> str:
        if self.mask is not None:
            return self.mask.choice[t - 1][i]
        return TIB if self.cache is None else CACHE

    def _features_at(self, t: int) -> list[np.ndarray]:
        feats = self._memo.get(t)
        if feats is not None:
            return feats
        model = self.model
        tvec = np.array([t])
        feats = [None] * model.n
        tib_blocks = [i for i in range(model.n) if self.choice(t, i) == TIB]
        if tib_blocks:
            with ag.no_grad():
                hout = model.time_embed(tvec, self)
                for i in tib_blocks:
                    feats[i] = model.embed_layer(i, hout, tvec, self).data[0]
        for i in range(model.n):
            if feats[i] is None:
                feats[i] = self._cached[t - 1, i]
        self._memo[t] = feats
        return feats

    def temporal_features(self, model: Denoiser, tvec) -> list[ag.Tensor]:
        tvec = np.atleast_1d(np.asarray(tvec, dtype=np.int64))
        uniq, inv = np.unique(tvec, return_inverse=True)
        table = np.stack([np.stack(self._features_at(int(t))) for t in uniq])
        return [ag.Tensor(table[inv, i]) for i in range(model.n)]

    def eps(self, x, t) -> np.ndarray:
        return self.model.eps(x, t, self)


def assemble_quantized_model(
    model: Denoiser,
    qset: QuantParamSet,
    cache: "TemporalFeatureCache | None" = None,
    mask: "SelectionMask | None" = None,
) -> QuantizedDenoiser:
    """Validate a bundle and build the runtime that executes it.

    Without a mask every cell uses the TIB path when there is no cache and
    the cache otherwise.
    """
    T, n = model.T, model.n
    if mask is not None:
        if mask.tau.shape != (T, n):
            raise AssemblyError(f"mask shape {mask.tau.shape} does not match (T, n) = {(T, n)}")
        if cache is None and np.any(mask.choice == CACHE):
            raise AssemblyError("mask selects CACHE cells but no cache was given")
    if cache is not None and cache.fp.shape[:2] != (T, n):
        raise AssemblyError(f"cache shape {cache.fp.shape[:2]} does not match (T, n) = {(T, n)}")
    uses_tib = cache is None or (mask is not None and np.any(mask.choice == TIB))
    tib = build_tib(model)
    missing = []
    for i in range(n):
        for name in model.block_layers(i):
            if f"{name}/w" not in qset.weights:
                missing.append(f"{name}/w")
            if f"{name}:in" not in qset.activations:
                missing.append(f"{name}:in")
    if uses_tib:
        missing += [s for s in tib.weight_sites if s not in qset.weights]
        for site in tib.act_sites:
            v = qset.activations.get(site)
            if v is None:
                missing.append(site)
            elif isinstance(v, list) and len(v) != T:
                missing.append(f"{site} (table of {len(v)}, expected {T})")
    if missing:
        raise AssemblyError("missing quantization params for: " + ", ".join(missing))
    return QuantizedDenoiser(model, qset, cache, mask)


def temporal_table(model: Denoiser, rt=FP) -> np.ndarray:
    """(T, n, width) temporal features as produced by runtime ``rt``."""
    return capture_temporal_features(model, rt=rt)


def feature_mse(fp: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-(t, i) mean squared error between two feature tables."""
    return np.mean((q - fp) ** 2, axis=-1)


# --------------------------------------------------------------------- TIAR


def _channel_scales(p: QuantParams, rows: int) -> tuple[np.ndarray, np.ndarray]:
    if p.axis not in (None, 0):
        raise QuantConfigError("weight params must be per-tensor or per-output-channel")
    return (
        np.broadcast_to(p.s, (rows,)).astype(np.float64),
        np.broadcast_to(p.z, (rows,)).astype(np.float64),
    )


class _WeightOptimizer:
    """Adam over (normalised scale, continuous zero offset) of some weights.

    The scale is parameterised as ``u * s0`` with ``u`` starting at 1; the
    forward pass always uses the rounded zero offset, so the loss at an
    iterate is the objective of its rounded params.
    """

    def __init__(self, model: Denoiser, qset: QuantParamSet, names: list[str], iters: int, lr: float):
        self.qset = qset
        self.names = names
        self.iters, self.lr = iters, lr
        self.s0, self.b, self.gscale, self.params = {}, {}, {}, {}
        for name in names:
            p = qset.weights[name]
            rows, fan_in = model.params[name].shape
            s0, z0 = _channel_scales(p, rows)
            self.s0[name], self.b[name] = s0, p.b
            self.gscale[name] = lsq_grad_scale(fan_in, p.qmax)
            self.params[f"{name}:u"] = np.ones(rows)
            self.params[f"{name}:z"] = z0.copy()
        self.opt = Adam(self.params, lr)

    def watch(self, tape: ag.GradTape) -> dict:
        trainable = {}
        for name in self.names:
            u = tape.watch(f"{name}:u", self.params[f"{name}:u"])
            z = tape.watch(f"{name}:z", self.params[f"{name}:z"])
            trainable[name] = (ag.mul(u, self.s0[name]), z, 2 ** self.b[name] - 1)
        return trainable

    def current(self) -> dict[str, QuantParams]:
        out = {}
        for name in self.names:
            s = np.maximum(self.params[f"{name}:u"] * self.s0[name], SCALE_FLOOR)
            z = np.clip(np.rint(self.params[f"{name}:z"]), 0, 2 ** self.b[name] - 1)
            out[name] = QuantParams(s, z.astype(np.int64), self.b[name], axis=0)
        return out

    def step(self, k: int, grads: dict[str, np.ndarray]) -> None:
        self.opt.lr = self.lr * 0.5 * (1.0 + math.cos(math.pi * k / self.iters))
        scaled = {key: g * self.gscale[key.rsplit(":", 1)[0]] for key, g in grads.items()}
        self.opt.step(self.params, scaled)
        for name in self.names:
            qmax = 2 ** self.b[name] - 1
            self.params[f"{name}:u"] = np.maximum(self.params[f"{name}:u"], SCALE_FLOOR / self.s0[name])
            self.params[f"{name}:z"] = np.clip(self.params[f"{name}:z"], 0, qmax)


def _with_weights(qset: QuantParamSet, weights: dict[str, QuantParams]) -> QuantParamSet:
    out = qset.copy()
    out.weights.update(weights)
    return out


def tib_objective(model: Denoiser, qset: QuantParamSet, target: np.ndarray | None = None) -> float:
    """Sum over t and blocks of ||X_{t,i} - X^_{t,i}||^2 with weight-only TIB quantization."""
    target = temporal_table(model) if target is None else target
    rt = QuantizedDenoiser(model, qset, quantize_acts=False)
    return float(np.sum((temporal_table(model, rt) - target) ** 2))


def tiar_reconstruct(
    model: Denoiser,
    tib: TemporalInformationBlock,
    qset: QuantParamSet,
    iters: int,
    lr: float,
    seed: int = 0,
    history: list | None = None,
) -> QuantParamSet:
    """Fit the TIB weight params to the full-precision temporal features.

    The objective sums the feature error over every timestep 1..T and every
    block; only the timestep enters, never a sample.  Activations stay in
    full precision here.  Returns the best params seen (never worse than
    the input).  ``seed`` is accepted for interface symmetry; the objective
    has no randomness.
    """
    if iters < 0:
        raise QuantConfigError("iters must be >= 0")
    names = list(tib.weight_sites)
    missing = [n for n in names if n not in qset.weights]
    if missing:
        raise QuantConfigError(f"TIB weights without initial params: {missing}")
    target = temporal_table(model)
    init_obj = tib_objective(model, qset, target)
    if history is not None:
        history.append(("init", init_obj))
    if iters == 0 or init_obj == 0:
        return qset.copy()

    ts = np.arange(1, model.T + 1)
    opt = _WeightOptimizer(model, qset, names, iters, lr)
    best, best_loss = None, math.inf
    for k in range(iters + 1):
        with ag.GradTape() as tape:
            rt = QuantRuntime(qset, trainable=opt.watch(tape), quantize_acts=False)
            feats = model.temporal_features(ts, rt)
            loss = ag.sqnorm(ag.sub(feats[0], target[:, 0]))
            for i in range(1, model.n):
                loss = ag.add(loss, ag.sqnorm(ag.sub(feats[i], target[:, i])))
        value = float(loss.data)
        if not math.isfinite(value):
            raise OptimizationError(f"TIB reconstruction objective became non-finite at iteration {k}")
        if value < best_loss:
            best_loss, best = value, opt.current()
        if k == iters:
            break
        opt.step(k, ag.backward(loss, tape))

    out = _with_weights(qset, best)
    final_obj = tib_objective(model, out, target)
    if not final_obj <= init_obj:
        out, final_obj = qset.copy(), init_obj
    if history is not None:
        history.append(("final", final_obj))
    return out


# ---------------------------------------------------------------------- FSC


def _calibrate_tib_sites(model, tib, qset, b_act, ts, per_timestep: bool, method: str) -> QuantParamSet:
    qset = qset.copy()
    for site in tib.act_sites:
        qset.activations.pop(site, None)
    for site in tib.act_sites:
        sink = _SiteCapture(site)
        capture_temporal_features(model, rt=QuantizedDenoiser(model, qset, capture=sink), ts=ts)
        rows = sink.rows
        if per_timestep:
            qset.activations[site] = [estimate_range(r, method, b_act) for r in rows]
        else:
            qset.activations[site] = estimate_range(rows, method, b_act)
    return qset


class _SiteCapture(dict):
    """Capture sink that keeps only one site."""

    def __init__(self, site: str):
        super().__init__()
        self.site = site
        self.rows: list[np.ndarray] = []

    def __getitem__(self, key):
        return self.rows if key == self.site else []


def fsc_calibrate(model: Denoiser, tib: TemporalInformationBlock, qset: QuantParamSet, b_act: int, method: str = "min-max") -> QuantParamSet:
    """One activation param pair per timestep for every TIB activation site.

    Sites are calibrated in forward order; each site sees the quantized
    output of the sites before it, so the tables line up with what the TIB
    path produces at inference.
    """
    return _calibrate_tib_sites(model, tib, qset, b_act, range(1, model.T + 1), True, method)


def shared_calibrate(
    model: Denoiser, tib: TemporalInformationBlock, qset: QuantParamSet, b_act: int, ts=None, method: str = "min-max"
) -> QuantParamSet:
    """One param pair per TIB activation site, pooled over timesteps ``ts``."""
    ts = range(1, model.T + 1) if ts is None else ts
    return _calibrate_tib_sites(model, tib, qset, b_act, ts, False, method)


# -------------------------------------------------------------------- cache


@dataclass
class TemporalFeatureCache:
    """Precomputed features with per-(t, i) quantization.

    ``fp`` is (T, n, width); ``s``/``z`` are (T, n); ``codes`` has the shape
    of ``fp``.
    """

    fp: np.ndarray
    s: np.ndarray
    z: np.ndarray
    codes: np.ndarray
    b: int

    @property
    def T(self) -> int:
        return self.fp.shape[0]

    @property
    def n(self) -> int:
        return self.fp.shape[1]

    def params(self, t: int, i: int) -> QuantParams:
        return QuantParams(self.s[t - 1, i], self.z[t - 1, i], self.b)

    def dequantized(self) -> np.ndarray:
        return self.s[..., None] * (self.codes - self.z[..., None])

    def losses(self) -> np.ndarray:
        return feature_mse(self.fp, self.dequantized())

    def _code_dtype(self) -> str:
        return "<u1" if self.b <= 8 else "<u2" if self.b <= 16 else "<u4"

    def save(self, path) -> tuple[Path, Path]:
        """``<path>.json`` manifest plus ``<path>.bin`` with codes then float64 features."""
        path = Path(path)
        manifest_path, blob_path = path.with_suffix(".json"), path.with_suffix(".bin")
        codes = np.ascontiguousarray(self.codes, dtype=self._code_dtype()).tobytes()
        fp = np.ascontiguousarray(self.fp, dtype="<f8").tobytes()
        cells = [
            {"t": t + 1, "i": i, "s": float(self.s[t, i]), "z": int(self.z[t, i]), "shape": [self.fp.shape[2]]}
            for t in range(self.T)
            for i in range(self.n)
        ]
        manifest = {
            "format": "tempq-feature-cache-1",
            "T": self.T,
            "n": self.n,
            "b": self.b,
            "code_dtype": self._code_dtype(),
            "blob": blob_path.name,
            "codes_bytes": len(codes),
            "cells": cells,
        }
        _atomic_write(blob_path, codes + fp)
        _atomic_write(manifest_path, json.dumps(manifest, indent=1).encode())
        return manifest_path, blob_path

    @classmethod
    def load(cls, path) -> "TemporalFeatureCache":
        path = Path(path)
        manifest_path = path.with_suffix(".json")
        try:
            m = json.loads(manifest_path.read_text())
            blob = (manifest_path.parent / m["blob"]).read_bytes()
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise AssemblyError(f"cannot read feature cache {manifest_path}: {exc}") from exc
        T, n = m["T"], m["n"]
        width = m["cells"][0]["shape"][0]
        nb = m["codes_bytes"]
        codes = np.frombuffer(blob[:nb], dtype=m["code_dtype"]).astype(np.int64).reshape(T, n, width)
        fp = np.frombuffer(blob[nb:], dtype="<f8").astype(np.float64).reshape(T, n, width)
        s = np.empty((T, n))
        z = np.empty((T, n), dtype=np.int64)
        for c in m["cells"]:
            s[c["t"] - 1, c["i"]] = c["s"]
            z[c["t"] - 1, c["i"]] = c["z"]
        return cls(fp, s, z, codes, int(m["b"]))


def cache_maintain(fp_features: np.ndarray, b: int = 8, iters: int = 300, lr: float = 0.05, seed: int = 0) -> TemporalFeatureCache:
    """LSQ-tune one (s, z) per cached feature, starting from its min-max range.

    Every (t, i) cell is an independent problem; they run as rows of one
    vectorised optimisation, which is deterministic and independent of row
    order, so ``seed`` is not needed.
    """
    fp = np.asarray(fp_features, dtype=np.float64)
    T, n, width = fp.shape
    rows = fp.reshape(T * n, width)
    p0 = params_from_range(rows.min(axis=1), rows.max(axis=1), b, axis=0)
    p = lsq_optimize(rows, p0, iters=iters, lr=lr) if iters > 0 else p0
    codes = quantize(rows, p)
    return TemporalFeatureCache(
        fp.copy(), p.s.reshape(T, n).copy(), p.z.reshape(T, n).copy(), codes.reshape(T, n, width), b
    )


# ---------------------------------------------------------------- selection


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def temporal_loss(fp: np.ndarray, q: np.ndarray, kind: str = "mse") -> np.ndarray:
    """Per-(t, i) disagreement between full-precision and quantized features.

    ``kl`` and ``ce`` compare softmax distributions over the feature
    channels (KL(p_fp || p_q) and the cross-entropy H(p_fp, p_q)).
    """
    if kind == "mse":
        return feature_mse(fp, q)
    p, r = _softmax(fp), _softmax(q)
    ce = -np.sum(p * np.log(r), axis=-1)
    if kind == "ce":
        return ce
    if kind == "kl":
        return np.maximum(ce + np.sum(p * np.log(p), axis=-1), 0.0)
    raise QuantConfigError(f"unknown selection loss {kind!r}; choose from {SELECTION_LOSSES}")


@dataclass
class SelectionMask:
    tau: np.ndarray
    choice: np.ndarray
    loss_tm: np.ndarray
    loss_cm: np.ndarray

    def counts(self) -> dict[str, int]:
        return {TIB: int(np.sum(self.choice == TIB)), CACHE: int(np.sum(self.choice == CACHE))}

    def to_json(self) -> str:
        T, n = self.tau.shape
        cells = [
            {
                "t": t + 1,
                "i": i,
                "tau": _json_float(self.tau[t, i]),
                "choice": str(self.choice[t, i]),
                "loss_tm": float(self.loss_tm[t, i]),
                "loss_cm": float(self.loss_cm[t, i]),
            }
            for t in range(T)
            for i in range(n)
        ]
        return json.dumps({"T": T, "n": n, "cells": cells}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SelectionMask":
        doc = json.loads(text)
        T, n = doc["T"], doc["n"]
        tau, tm, cm = np.empty((T, n)), np.empty((T, n)), np.empty((T, n))
        choice = np.empty((T, n), dtype=object)
        for c in doc["cells"]:
            k = (c["t"] - 1, c["i"])
            tau[k] = float(c["tau"])
            choice[k] = c["choice"]
            tm[k], cm[k] = c["loss_tm"], c["loss_cm"]
        return cls(tau, choice, tm, cm)


def _json_float(v: float):
    return "inf" if math.isinf(v) else float(v)


def select_maintenance(loss_tm, loss_cm) -> SelectionMask:
    """TIB where its error is strictly below the cache error, cache otherwise.

    tau = loss_tm / loss_cm; a zero cache error gives tau = inf, and 0/0
    counts as a tie (tau = 1), so both go to the cache.
    """
    tm = np.asarray(loss_tm, dtype=np.float64)
    cm = np.asarray(loss_cm, dtype=np.float64)
    if tm.shape != cm.shape:
        raise QuantConfigError(f"loss tables differ in shape: {tm.shape} vs {cm.shape}")
    if np.any(tm < 0) or np.any(cm < 0) or not (np.all(np.isfinite(tm)) and np.all(np.isfinite(cm))):
        raise QuantConfigError("losses must be finite and non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.where(cm > 0, tm / np.where(cm > 0, cm, 1.0), np.where(tm > 0, np.inf, 1.0))
    choice = np.where(tau < 1.0, TIB, CACHE).astype(object)
    return SelectionMask(tau, choice, tm.copy(), cm.copy())


# -------------------------------------------------------------- calibration


@dataclass
class CalibSet:
    """(x_t, t) pairs taken from full-precision sampling trajectories."""

    x: np.ndarray
    t: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    def timesteps(self) -> list[int]:
        return sorted(int(t) for t in np.unique(self.t))


def make_calibration_set(model: Denoiser, sched: NoiseSchedule, trajectories: int = 256, stride: int = 4, seed: int = 0) -> CalibSet:
    """Run the full-precision DDPM sampler and keep every ``stride``-th timestep from T down."""
    _, traj = sample(model, trajectories, sched, "ddpm", seed=seed, return_trajectory=True)
    ts = [t for t in range(sched.T, 0, -1) if (sched.T - t) % stride == 0]
    x = np.concatenate([traj[t] for t in ts])
    t = np.repeat(np.array(ts, dtype=np.int64), trajectories)
    return CalibSet(x, t)


def calibrate_block_acts(
    model: Denoiser,
    qset: QuantParamSet,
    calib: CalibSet,
    b_act: int,
    cache=None,
    mask=None,
    method: str = "min-max",
    chunk: int = 2048,
) -> QuantParamSet:
    """Per-tensor params for the residual-block activation sites.

    One pass over the calibration set with quantized weights and the
    strategy's temporal path (already-calibrated TIB sites quantized).
    """
    qset = qset.copy()
    sites = [s for i in range(model.n) for s in model.block_act_sites(i)]
    for s in sites:
        qset.activations.pop(s, None)
    captured = {s: [] for s in sites}
    rt = QuantizedDenoiser(model, qset, cache, mask, capture=_MultiCapture(captured))
    with ag.no_grad():
        for lo in range(0, len(calib), chunk):
            model.forward(calib.x[lo : lo + chunk], calib.t[lo : lo + chunk], rt)
    for s in sites:
        qset.activations[s] = estimate_range(captured[s], method, b_act)
    return qset


class _MultiCapture(dict):
    def __init__(self, sinks: dict[str, list]):
        super().__init__(sinks)

    def __missing__(self, key):
        return []


# ----------------------------------------------------------------- baseline


def _block_targets(model: Denoiser, calib: CalibSet, chunk: int = 2048) -> list[np.ndarray]:
    """Full-precision input of block 0 and the output of every block."""
    outs = [[] for _ in range(model.n + 1)]
    with ag.no_grad():
        for lo in range(0, len(calib), chunk):
            x, t = calib.x[lo : lo + chunk], calib.t[lo : lo + chunk]
            cap = CaptureRuntime(sites=[f"block{i}:out" for i in range(model.n)])
            model.forward(x, t, cap)
            outs[0].append(model.stem(x).data)
            for i in range(model.n):
                outs[i + 1].append(cap.capture[f"block{i}:out"][0])
    return [np.concatenate(o) for o in outs]


def _block_loss(model, i, rt, hin, t, target, temb) -> float:
    with ag.no_grad():
        out = model.block(i, ag.Tensor(hin), temb, t, rt)
    return float(np.sum((out.data - target) ** 2) / len(t))


def baseline_block_reconstruct(
    model: Denoiser,
    qset: QuantParamSet,
    calib: CalibSet,
    iters: int,
    lr: float,
    seed: int = 0,
    include_embedding: bool = True,
    temporal: np.ndarray | None = None,
    batch_size: int = 32,
    eval_every: int = 25,
    history: list | None = None,
) -> QuantParamSet:
    """Block-wise reconstruction of weight params, blocks in forward order.

    Each block's quantized copy gets inputs from the already-reconstructed
    quantized blocks before it and is fit to the full-precision block
    output on the calibration set.  With ``include_embedding`` the block's
    embedding layer is optimized together with the block (the temporal
    feature is recomputed from the quantized time embed); otherwise the
    temporal features come fixed from ``temporal`` ((T, n, width) table).
    Weight-only: activations stay in full precision.  Best-so-far per block
    on the full calibration set, checked every ``eval_every`` iterations.
    """
    if iters < 0:
        raise QuantConfigError("iters must be >= 0")
    if iters == 0:
        return qset.copy()
    if not include_embedding and temporal is None:
        raise QuantConfigError("a fixed temporal table is required when embeddings are not reconstructed")
    qset = qset.copy()
    fp = _block_targets(model, calib)
    t_all = calib.t
    hq = fp[0]
    htab = None
    if include_embedding:
        rt_h = QuantizedDenoiser(model, qset, quantize_acts=False)
        with ag.no_grad():
            htab = np.concatenate([model.time_embed(np.array([t]), rt_h).data for t in range(1, model.T + 1)])

    for i in range(model.n):
        names = [f"{name}/w" for name in model.block_layers(i)]
        if include_embedding:
            names.append(f"block{i}/emb/w")
        target = fp[i + 1]

        def temb_for(rt, rows, i=i):
            tv = t_all[rows]
            if include_embedding:
                return model.embed_layer(i, ag.Tensor(htab[tv - 1]), tv, rt)
            return ag.Tensor(temporal[tv - 1, i])

        def full_loss(q):
            rt = QuantizedDenoiser(model, q, quantize_acts=False)
            with ag.no_grad():
                temb = temb_for(rt, slice(None))
            return _block_loss(model, i, rt, hq, t_all, target, temb)

        init = full_loss(qset)
        best_loss, best = init, None
        opt = _WeightOptimizer(model, qset, names, iters, lr)
        rng = np.random.default_rng([seed, i])
        for k in range(iters):
            rows = rng.integers(0, len(t_all), size=batch_size)
            with ag.GradTape() as tape:
                rt = QuantRuntime(qset, trainable=opt.watch(tape), quantize_acts=False)
                temb = temb_for(rt, rows)
                out = model.block(i, ag.Tensor(hq[rows]), temb, t_all[rows], rt)
                diff = ag.sub(out, target[rows])
                loss = ag.mul(ag.sqnorm(diff), 1.0 / batch_size)
            if not np.isfinite(loss.data):
                raise OptimizationError(f"block {i}: reconstruction loss became non-finite at iteration {k}")
            opt.step(k, ag.backward(loss, tape))
            if (k + 1) % eval_every == 0 or k + 1 == iters:
                cand = opt.current()
                value = full_loss(_with_weights(qset, cand))
                if not math.isfinite(value):
                    raise OptimizationError(f"block {i}: reconstruction loss became non-finite")
                if value < best_loss:
                    best_loss, best = value, cand
        if best is not None:
            qset = _with_weights(qset, best)
        if history is not None:
            history.append((i, init, best_loss))
        rt = QuantizedDenoiser(model, qset, quantize_acts=False)
        with ag.no_grad():
            hq = model.block(i, ag.Tensor(hq), temb_for(rt, slice(None)), t_all, rt).data
    return qset


def block_losses(model: Denoiser, qset: QuantParamSet, calib: CalibSet, temporal: np.ndarray | None = None) -> list[float]:
    """Per-block reconstruction loss as measured by :func:`baseline_block_reconstruct`.

    With ``temporal=None`` the temporal features come from the quantized
    time embed and embedding layers (weight-only).
    """
    fp = _block_targets(model, calib)
    rt = QuantizedDenoiser(model, qset, quantize_acts=False)
    t_all = calib.t
    if temporal is None:
        with ag.no_grad():
            htab = np.concatenate([model.time_embed(np.array([t]), rt).data for t in range(1, model.T + 1)])
    hq = fp[0]
    losses = []
    for i in range(model.n):
        with ag.no_grad():
            if temporal is None:
                temb = model.embed_layer(i, ag.Tensor(htab[t_all - 1]), t_all, rt)
            else:
                temb = ag.Tensor(temporal[t_all - 1, i])
            out = model.block(i, ag.Tensor(hq), temb, t_all, rt).data
        losses.append(float(np.sum((out - fp[i + 1]) ** 2) / len(t_all)))
        hq = out
    return losses


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
