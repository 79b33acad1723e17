"""Uniform affine fake quantization, range estimators and LSQ refinement."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag

SCALE_FLOOR = 1e-8
PERCENTILE = 99.9
KL_BINS = 2048
MSE_GRID = 100

ESTIMATORS = ("min-max", "mse", "percentile", "kl")


class QuantConfigError(ValueError):
    pass


class OptimizationError(RuntimeError):
    pass


@dataclass
class QuantParams:
    """Scale ``s`` and integer zero offset ``z`` for a ``b``-bit code range.

    ``axis is None`` means per-tensor (``s``/``z`` are 0-d); otherwise ``s``
    and ``z`` are 1-D and broadcast along ``axis`` (per-channel).
    """

    s: np.ndarray
    z: np.ndarray
    b: int
    axis: int | None = None

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.int64)
        if self.b < 2:
            raise QuantConfigError(f"bit-width must be >= 2, got {self.b}")
        if np.any(~(self.s > 0)):
            raise QuantConfigError("scale must be positive")
        if np.any(self.z < 0) or np.any(self.z > self.qmax):
            raise QuantConfigError(f"zero offset outside [0, {self.qmax}]")
        if self.axis is None and self.s.ndim != 0:
            raise QuantConfigError("per-tensor params need scalar s/z")

    @property
    def qmax(self) -> int:
        return 2**self.b - 1

    @property
    def granularity(self) -> str:
        return "per-tensor" if self.axis is None else f"per-channel({self.axis})"

    def _bcast(self, ndim: int):
        if self.axis is None:
            return self.s, self.z
        shape = [1] * ndim
        shape[self.axis] = -1
        return self.s.reshape(shape), self.z.reshape(shape)

    def to_dict(self) -> dict:
        return {
            "s": self.s.tolist(),
            "z": self.z.tolist(),
            "b": self.b,
            "granularity": self.granularity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        gran = d["granularity"]
        if gran == "per-tensor":
            axis = None
        elif gran.startswith("per-channel(") and gran.endswith(")"):
            axis = int(gran[len("per-channel(") : -1])
        else:
            raise QuantConfigError(f"unknown granularity {gran!r}")
        return cls(np.asarray(d["s"], dtype=np.float64), np.asarray(d["z"], dtype=np.int64), int(d["b"]), axis)

    def __eq__(self, other):
        if not isinstance(other, QuantParams):
            return NotImplemented
        return (
            self.b == other.b
            and self.axis == other.axis
            and np.array_equal(self.s, other.s)
            and np.array_equal(self.z, other.z)
        )


def stack_rows(table: Sequence[QuantParams]) -> QuantParams:
    """Turn a per-timestep table of per-tensor params into per-row params (axis 0)."""
    b = table[0].b
    return QuantParams(
        np.array([p.s for p in table], dtype=np.float64),
        np.array([p.z for p in table], dtype=np.int64),
        b,
        axis=0,
    )


def quantize(x, p: QuantParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    s, z = p._bcast(x.ndim)
    return np.clip(np.rint(x / s) + z, 0, p.qmax).astype(np.int64)


def dequantize(codes, p: QuantParams) -> np.ndarray:
    codes = np.asarray(codes)
    if np.any(codes < 0) or np.any(codes > p.qmax):
        raise QuantConfigError(f"codes outside [0, {p.qmax}]")
    s, z = p._bcast(codes.ndim)
    return s * (codes - z)


def fake_quant(x, p: QuantParams):
    """Quantize-dequantize.  Tensors go through the tape (STE); arrays do not."""
    if isinstance(x, ag.Tensor):
        return ag.fake_quant(x, p.s, p.z.astype(np.float64), p.qmax, axis=p.axis)
    return dequantize(quantize(x, p), p)


# ---------------------------------------------------------------- estimators


def params_from_range(lo, hi, b: int, axis: int | None = None, symmetric: bool = False) -> QuantParams:
    """Min-max rule: the clamp range always contains zero.

    A constant input (``lo == hi != 0``) gets a power-of-two fraction of the
    constant as its scale, so the constant sits exactly on a code.
    """
    raw_lo = np.asarray(lo, dtype=np.float64)
    raw_hi = np.asarray(hi, dtype=np.float64)
    lo = np.minimum(raw_lo, 0.0)
    hi = np.maximum(raw_hi, 0.0)
    qmax = 2**b - 1
    half = 2 ** (b - 1)
    if symmetric:
        amax = np.maximum(-lo, hi)
        s = np.maximum(amax / (half - 1), SCALE_FLOOR)
        z = np.full(s.shape, half, dtype=np.int64)
    else:
        s = np.maximum((hi - lo) / qmax, SCALE_FLOOR)
        z = np.clip(np.rint(-lo / s), 0, qmax).astype(np.int64)
    const = (raw_lo == raw_hi) & (raw_lo != 0)
    if np.any(const):
        c = np.where(const, np.abs(raw_lo), 1.0)
        if symmetric:
            s = np.where(const, c / 2.0 ** (b - 2), s)
        else:
            s = np.where(const, c / half, s)
            z = np.where(const, np.where(raw_lo > 0, 0, half), z).astype(np.int64)
        # constants smaller than the floor would otherwise get a zero scale
        s = np.maximum(s, SCALE_FLOOR)
    return QuantParams(s, z, b, axis)


def _reduce_axes(ndim: int, axis: int | None):
    if axis is None:
        return None
    return tuple(i for i in range(ndim) if i != axis % ndim)


def _sq_error(x: np.ndarray, p: QuantParams, axis: int | None) -> np.ndarray:
    err = (fake_quant(x, p) - x) ** 2
    return err.sum(axis=_reduce_axes(x.ndim, axis))


def _mse_search(x: np.ndarray, lo, hi, b, axis, symmetric):
    best_p = params_from_range(lo, hi, b, axis, symmetric)
    best_e = _sq_error(x, best_p, axis)
    for k in range(1, MSE_GRID):
        f = k / MSE_GRID
        p = params_from_range(f * lo, f * hi, b, axis, symmetric)
        e = _sq_error(x, p, axis)
        better = e < best_e
        if np.any(better):
            best_p = QuantParams(
                np.where(better, p.s, best_p.s), np.where(better, p.z, best_p.z), b, axis
            )
            best_e = np.where(better, e, best_e)
    return best_p


def _kl_threshold(values: np.ndarray, b: int) -> float:
    """Entropy calibration on |x| with a KL_BINS histogram."""
    a = np.abs(values.ravel())
    amax = a.max()
    if amax == 0:
        return 0.0
    hist, edges = np.histogram(a, bins=KL_BINS, range=(0.0, amax))
    hist = hist.astype(np.float64)
    levels = 2 ** (b - 1)
    best_i, best_kl = KL_BINS, np.inf
    for i in range(levels, KL_BINS + 1):
        ref = hist[:i].copy()
        ref[i - 1] += hist[i:].sum()
        if ref.sum() == 0:
            continue
        # merge into `levels` groups, then expand back over the non-empty bins
        groups = np.array_split(np.arange(i), levels)
        cand = np.zeros(i)
        src = hist[:i]
        for grp in groups:
            nz = src[grp] > 0
            if nz.any():
                cand[grp[nz]] = src[grp].sum() / nz.sum()
        pmask = ref > 0
        if np.any(pmask & (cand == 0)):
            cand = cand + 1e-12 * pmask
        p = ref / ref.sum()
        q = cand / cand.sum()
        kl = np.sum(p[pmask] * np.log(p[pmask] / q[pmask]))
        if kl < best_kl:
            best_kl, best_i = kl, i
    return float(edges[best_i])


def estimate_range(
    samples,
    method: str = "min-max",
    b: int = 8,
    axis: int | None = None,
    symmetric: bool = False,
) -> QuantParams:
    """Estimate quantization params for one site from calibration samples.

    ``samples`` is a tensor or a sequence of tensors with matching trailing
    shape; statistics are pooled over all of them.  ``axis`` selects
    per-channel granularity (channel axis of each sample).
    """
    if isinstance(samples, np.ndarray) or isinstance(samples, ag.Tensor):
        samples = [samples]
    arrays = [np.asarray(s.data if isinstance(s, ag.Tensor) else s, dtype=np.float64) for s in samples]
    if not arrays:
        raise QuantConfigError("estimate_range needs at least one sample")
    if method not in ESTIMATORS:
        raise QuantConfigError(f"unknown estimator {method!r}; choose from {ESTIMATORS}")
    if axis is None:
        x = np.concatenate([a.ravel() for a in arrays])
    else:
        # channel axis first, everything else flattened
        x = np.concatenate([np.moveaxis(a, axis, 0).reshape(a.shape[axis], -1) for a in arrays], axis=1)
    red_axis = None if axis is None else 0
    red = _reduce_axes(x.ndim, red_axis)

    if method == "min-max":
        return params_from_range(x.min(axis=red), x.max(axis=red), b, axis, symmetric)
    if method == "mse":
        best = _mse_search(x, x.min(axis=red), x.max(axis=red), b, red_axis, symmetric)
        return QuantParams(best.s, best.z, b, axis)
    if method == "percentile":
        lo = np.percentile(x, 100.0 - PERCENTILE, axis=red)
        hi = np.percentile(x, PERCENTILE, axis=red)
        return params_from_range(lo, hi, b, axis, symmetric)
    # kl
    if axis is None:
        thr = _kl_threshold(x, b)
        return params_from_range(max(x.min(), -thr), min(x.max(), thr), b, None, symmetric)
    thr = np.array([_kl_threshold(row, b) for row in x])
    return params_from_range(np.maximum(x.min(axis=1), -thr), np.minimum(x.max(axis=1), thr), b, axis, symmetric)


# ----------------------------------------------------------------------- LSQ


class Adam:
    """Adam on a dict of numpy parameters."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999), eps=1e-12):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mh = self.m[k] / (1 - b1**self.t)
            vh = self.v[k] / (1 - b2**self.t)
            params[k] = params[k] - self.lr * mh / (np.sqrt(vh) + self.eps)


def lsq_grad_scale(numel_per_scale: int, qmax: int) -> float:
    return 1.0 / math.sqrt(numel_per_scale * qmax)


def round_params(s: np.ndarray, z: np.ndarray, b: int, axis) -> QuantParams:
    qmax = 2**b - 1
    return QuantParams(np.maximum(s, SCALE_FLOOR), np.clip(np.rint(z), 0, qmax).astype(np.int64), b, axis)


def lsq_objective(x: np.ndarray, p: QuantParams, target: np.ndarray | None = None) -> float:
    ref = x if target is None else target
    return float(np.sum((fake_quant(x, p) - ref) ** 2))


def _row_objective(x, target, s, z, qmax):
    zr = np.rint(z)[:, None]
    code = np.clip(np.rint(x / s[:, None]) + zr, 0, qmax)
    return np.sum((s[:, None] * (code - zr) - target) ** 2, axis=1)


def lsq_rows(
    x: np.ndarray,
    target: np.ndarray,
    s_init: np.ndarray,
    z_init: np.ndarray,
    b: int,
    iters: int,
    lr: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Independent LSQ problems, one per row of ``x`` (shape R x N).

    Returns per-row best (scale, integer zero offset, objective) over the
    initial point and every iterate.  Rows never interact, so results do not
    depend on row order.
    """
    qmax = 2**b - 1
    s0 = np.maximum(np.asarray(s_init, dtype=np.float64), SCALE_FLOOR)
    z0 = np.clip(np.rint(z_init), 0, qmax).astype(np.float64)
    gscale = lsq_grad_scale(x.shape[1], qmax)
    best_s, best_z = s0.copy(), z0.copy()
    best_obj = _row_objective(x, target, s0, z0, qmax)
    params = {"u": np.ones_like(s0), "z": z0.copy()}
    opt = Adam(params, lr)
    for k in range(iters):
        opt.lr = lr * 0.5 * (1.0 + math.cos(math.pi * k / iters))
        with ag.GradTape() as tape:
            u = tape.watch("u", params["u"])
            z = tape.watch("z", params["z"])
            xq = ag.fake_quant(x, ag.mul(u, s0), z, qmax, axis=0)
            loss = ag.sqnorm(ag.sub(xq, target))
        if not np.isfinite(loss.data):
            raise OptimizationError("LSQ objective became non-finite")
        grads = ag.backward(loss, tape)
        opt.step(params, {n: g * gscale for n, g in grads.items()})
        params["u"] = np.maximum(params["u"], SCALE_FLOOR / s0)
        params["z"] = np.clip(params["z"], 0, qmax)
        s_k = np.maximum(params["u"] * s0, SCALE_FLOOR)
        obj = _row_objective(x, target, s_k, params["z"], qmax)
        better = obj < best_obj
        best_s = np.where(better, s_k, best_s)
        best_z = np.where(better, np.rint(params["z"]), best_z)
        best_obj = np.where(better, obj, best_obj)
    return best_s, best_z.astype(np.int64), best_obj


# (low, high) clamp-range multipliers for extra starting points; small tensors
# have many local minima in (s, z)
_MULTS = (1.0, 0.4, 0.6, 0.8, 1.2, 1.4, 1.6)
LSQ_RESTARTS = tuple((a, b) for a in _MULTS for b in _MULTS)


def lsq_optimize(
    x: np.ndarray | Callable[[], np.ndarray],
    p0: QuantParams,
    iters: int = 300,
    lr: float = 0.05,
    target: np.ndarray | None = None,
    restarts: Sequence[tuple[float, float]] = LSQ_RESTARTS,
) -> QuantParams:
    """Refine ``p0`` by gradient descent on ||fake_quant(x) - target||^2.

    The scale is updated in units of its initial value with the LSQ gradient
    scale 1/sqrt(N * qmax) under Adam; the zero offset is continuous and
    rounded on return.  Each ``(f_lo, f_hi)`` in ``restarts`` scales the two
    ends of the clamp range of ``p0`` to give another starting point.  The best parameters seen
    (objective measured with the rounded zero offset) are returned, per
    channel, so the result is never worse than ``p0``.
    """
    if iters < 1:
        raise QuantConfigError("iters must be >= 1")
    xs = np.asarray(x() if callable(x) else x, dtype=np.float64)
    ref = xs if target is None else np.asarray(target, dtype=np.float64)
    if ref.shape != xs.shape:
        raise QuantConfigError(f"target shape {ref.shape} != input shape {xs.shape}")
    if p0.axis is None:
        rows_x, rows_t = xs.reshape(1, -1), ref.reshape(1, -1)
        s, z = p0.s.reshape(1), p0.z.reshape(1)
    else:
        rows_x = np.moveaxis(xs, p0.axis, 0).reshape(xs.shape[p0.axis], -1)
        rows_t = np.moveaxis(ref, p0.axis, 0).reshape(ref.shape[p0.axis], -1)
        s, z = p0.s, p0.z
    C = rows_x.shape[0]
    init_obj = _row_objective(rows_x, rows_t, s, z.astype(np.float64), p0.qmax)
    if not np.any(init_obj > 0):
        return p0

    lo = s * (0 - z)
    hi = s * (p0.qmax - z)
    s_init, z_init = [], []
    for f_lo, f_hi in restarts:
        p = params_from_range(f_lo * lo, f_hi * hi, p0.b, 0)
        s_init.append(p.s)
        z_init.append(p.z)
    R = len(restarts)
    bs, bz, bo = lsq_rows(
        np.tile(rows_x, (R, 1)), np.tile(rows_t, (R, 1)),
        np.concatenate(s_init), np.concatenate(z_init), p0.b, iters, lr,
    )
    bs, bz, bo = bs.reshape(R, C), bz.reshape(R, C), bo.reshape(R, C)
    pick = np.argmin(bo, axis=0)
    cols = np.arange(C)
    cand_s, cand_z, cand_o = bs[pick, cols], bz[pick, cols], bo[pick, cols]
    keep = cand_o < init_obj
    out_s = np.where(keep, cand_s, s)
    out_z = np.where(keep, cand_z, z)
    if p0.axis is None:
        return QuantParams(out_s[0], out_z[0], p0.b, None)
    return QuantParams(out_s, out_z, p0.b, p0.axis)


# ------------------------------------------------------------- QuantParamSet


@dataclass
class QuantParamSet:
    """Weight params per parameter name; activation params per site.

    An activation entry is either one :class:`QuantParams` or a list of ``T``
    per-timestep params (index ``t - 1``).
    """

    weights: dict[str, QuantParams]
    activations: dict[str, QuantParams | list[QuantParams]]
    T: int | None = None

    def __post_init__(self):
        for site, v in self.activations.items():
            if isinstance(v, list) and self.T is not None and len(v) != self.T:
                raise QuantConfigError(f"site {site}: per-timestep table has {len(v)} entries, expected {self.T}")

    def copy(self) -> "QuantParamSet":
        return QuantParamSet(
            dict(self.weights),
            {k: (list(v) if isinstance(v, list) else v) for k, v in self.activations.items()},
            self.T,
        )

    def is_per_timestep(self, site: str) -> bool:
        return isinstance(self.activations.get(site), list)

    def to_json(self) -> str:
        doc = {
            "T": self.T,
            "weights": {k: v.to_dict() for k, v in sorted(self.weights.items())},
            "activations": {
                k: ([p.to_dict() for p in v] if isinstance(v, list) else v.to_dict())
                for k, v in sorted(self.activations.items())
            },
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "QuantParamSet":
        doc = json.loads(text)
        acts = {
            k: ([QuantParams.from_dict(p) for p in v] if isinstance(v, list) else QuantParams.from_dict(v))
            for k, v in doc["activations"].items()
        }
        return cls({k: QuantParams.from_dict(v) for k, v in doc["weights"].items()}, acts, doc.get("T"))

    def __eq__(self, other):
        if not isinstance(other, QuantParamSet):
            return NotImplemented
        return self.T == other.T and self.weights == other.weights and self.activations == other.activations
