"""Error metrics and disturbance experiments."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.stats import spearmanr

from . import autograd as ag
from .diffusion import NoiseSchedule, sample
from .model import FP, Denoiser, Runtime
from .runtime import CaptureRuntime, HookedRuntime

SQNR_INF = math.inf


class MetricError(ValueError):
    pass


# ------------------------------------------------------------- similarity


def cosine_rows(a, b) -> np.ndarray:
    """Cosine similarity along the last axis.

    Zero-norm convention: 1 when both vectors are zero, 0 when only one is.
    Identical vectors give exactly 1.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
    dot = np.sum(a * b, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = dot / (na * nb)
    c = np.where((na == 0) & (nb == 0), 1.0, np.where((na == 0) | (nb == 0), 0.0, c))
    c = np.where(np.all(a == b, axis=-1), 1.0, c)
    return np.clip(c, -1.0, 1.0)


def temporal_error(fp_features, q_features) -> tuple[np.ndarray, np.ndarray]:
    """Per-timestep mean cosine E_t and per-(t, i) MSE of two (T, n, width) tables."""
    fp, q = np.asarray(fp_features), np.asarray(q_features)
    if fp.shape != q.shape:
        raise MetricError(f"feature tables differ in shape: {fp.shape} vs {q.shape}")
    cos = cosine_rows(fp, q)
    return cos.mean(axis=1), np.mean((q - fp) ** 2, axis=-1)


def mismatch_index(fp_features, q_features) -> np.ndarray:
    """delta[t, i] = argmax_t' cos(q[t, i], fp[t', i]) - t (first maximum on ties)."""
    fp, q = np.asarray(fp_features, dtype=np.float64), np.asarray(q_features, dtype=np.float64)
    if fp.shape != q.shape:
        raise MetricError(f"feature tables differ in shape: {fp.shape} vs {q.shape}")
    T, n, _ = fp.shape
    delta = np.empty((T, n), dtype=np.int64)
    for i in range(n):
        # (T_q, T_fp) similarity matrix for block i
        sim = cosine_rows(q[:, i][:, None, :], fp[:, i][None, :, :])
        delta[:, i] = np.argmax(sim, axis=1) - np.arange(T)
    return delta


# ------------------------------------------------------------------ noise


def feature_stats(samples, axis=0) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation over ``axis``."""
    x = np.asarray(samples, dtype=np.float64)
    return x.mean(axis=axis), x.std(axis=axis)


def inject_noise(features, lam: float, seed=0, mu=None, sigma=None) -> np.ndarray:
    """features + lam * N(mu, sigma^2), drawn independently per entry.

    ``mu``/``sigma`` default to the per-channel statistics of ``features``
    over its leading axis.  ``seed`` may be an int or a Generator.
    """
    if lam < 0:
        raise MetricError("noise level must be >= 0")
    x = np.asarray(features, dtype=np.float64)
    if lam == 0:
        return x.copy()
    if mu is None or sigma is None:
        m, s = feature_stats(x.reshape(-1, x.shape[-1]) if x.ndim > 1 else x[:, None])
        mu = m if mu is None else mu
        sigma = s if sigma is None else sigma
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return x + lam * (mu + sigma * rng.standard_normal(x.shape))


class NoiseHook:
    """Activation hook adding lam * N(mu, sigma^2) at one site.

    ``shared=True`` draws one noise row for the whole batch (features that
    do not depend on the sample); otherwise every sample gets its own.
    """

    def __init__(self, lam: float, mu, sigma, rng: np.random.Generator, shared: bool):
        self.lam, self.mu, self.sigma, self.rng, self.shared = lam, mu, sigma, rng, shared

    def __call__(self, site, x: ag.Tensor, tvec) -> ag.Tensor:
        # draw even at lam == 0 so every level consumes the same stream
        shape = (1, x.shape[-1]) if self.shared else x.shape
        noise = self.mu + self.sigma * self.rng.standard_normal(shape)
        if self.lam == 0:
            return x
        return ag.add(x, self.lam * noise)


# ---------------------------------------------------------------- quality


def sqnr(reference: Sequence, quantized: Sequence) -> float:
    """10 log10(sum ||ref||^2 / sum ||ref - q||^2); inf when the error is zero."""
    refs = [np.asarray(r, dtype=np.float64) for r in reference]
    qs = [np.asarray(q, dtype=np.float64) for q in quantized]
    if not refs or len(refs) != len(qs):
        raise MetricError("sqnr needs two non-empty sequences of equal length")
    sig = err = 0.0
    for r, q in zip(refs, qs):
        if r.shape != q.shape:
            raise MetricError(f"shape mismatch {r.shape} vs {q.shape}")
        sig += float(np.sum(r * r))
        err += float(np.sum((r - q) ** 2))
    if sig == 0:
        raise MetricError("reference signal has zero power")
    if err == 0:
        return SQNR_INF
    return 10.0 * math.log10(sig / err)


def median_bandwidth(a, b) -> float:
    pooled = np.concatenate([np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)])
    h = float(np.median(pdist(pooled)))
    return h if h > 0 else 1.0


def mmd2(a, b, bandwidth: float | None = None) -> float:
    """Unbiased MMD^2 with k(x, y) = exp(-||x - y||^2 / (2 h^2)).

    ``h`` defaults to the median pairwise distance of the pooled points.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise MetricError("mmd2 needs at least two points per set")
    h = median_bandwidth(a, b) if bandwidth is None else bandwidth
    gamma = 1.0 / (2.0 * h * h)
    kaa = np.exp(-gamma * pdist(a, "sqeuclidean"))
    kbb = np.exp(-gamma * pdist(b, "sqeuclidean"))
    kab = np.exp(-gamma * cdist(a, b, "sqeuclidean"))
    # pdist lists each unordered pair once
    return float(2.0 * kaa.sum() / (m * (m - 1)) + 2.0 * kbb.sum() / (n * (n - 1)) - 2.0 * kab.mean())


def spearman(x, y) -> float:
    return float(spearmanr(x, y).statistic)


# ------------------------------------------------------------ experiments


def nontemporal_stats(model: Denoiser, sched: NoiseSchedule, sites, count: int = 256, seed: int = 0):
    """Per-channel (mu, sigma) of each site over a full-precision sampling run."""
    cap = CaptureRuntime(sites=sites)
    sample(model, count, sched, "ddpm", seed=seed, rt=cap)
    return {s: feature_stats(np.concatenate(cap.capture[s])) for s in sites}


def temporal_stats(model: Denoiser, fp_table: np.ndarray):
    """Per-channel (mu, sigma) of every block's temporal feature over all t."""
    return {f"block{i}/emb:out": feature_stats(fp_table[:, i]) for i in range(model.n)}


def sensitivity_sweep(
    model: Denoiser,
    sched: NoiseSchedule,
    target: str,
    lambdas: Sequence[float],
    samples: int,
    seed: int,
    fp_table: np.ndarray | None = None,
    sampler: str = "ddpm",
) -> list[dict]:
    """MMD^2 to full-precision samples as noise is injected at chosen sites.

    ``target="temporal"`` perturbs every block's temporal feature;
    ``"non-temporal"`` perturbs n randomly chosen sample-dependent sites.
    Noise is redrawn at every denoising step.  Every level reuses the same
    seeds (sampler and noise stream), so the lambda = 0 run reproduces the
    reference samples exactly.
    """
    from .diffusion import capture_temporal_features

    rng_sites = np.random.default_rng([seed, 21])
    if target == "temporal":
        table = capture_temporal_features(model) if fp_table is None else fp_table
        stats = temporal_stats(model, table)
        shared = True
    elif target == "non-temporal":
        pool = model.nontemporal_sites()
        picked = sorted(rng_sites.choice(len(pool), size=model.n, replace=False))
        sites = [pool[k] for k in picked]
        stats = nontemporal_stats(model, sched, sites, seed=seed + 1)
        shared = False
    else:
        raise MetricError(f"unknown target {target!r}")
    ref = sample(model, samples, sched, sampler, seed=seed)
    rows = []
    for lam in lambdas:
        rng = np.random.default_rng([seed, 22])
        hooks = {s: NoiseHook(lam, mu, sd, rng, shared) for s, (mu, sd) in stats.items()}
        pts = sample(model, samples, sched, sampler, seed=seed, rt=HookedRuntime(FP, hooks))
        rows.append({"target": target, "lambda": float(lam), "mmd2": mmd2(pts, ref), "sites": ";".join(stats)})
    return rows


def error_curves(model: Denoiser, sched: NoiseSchedule, rt: Runtime, count: int = 256, seed: int = 0) -> list[dict]:
    """Per-timestep cosine agreement of temporal and non-temporal features.

    Non-temporal features at t come from one quantized forward on the
    full-precision x_t (full precision everywhere before t); temporal ones
    from the quantized temporal path.
    """
    from .diffusion import capture_temporal_features

    _, traj = sample(model, count, sched, "ddpm", seed=seed, return_trajectory=True)
    fp_tab = capture_temporal_features(model, sched)
    q_tab = capture_temporal_features(model, sched, rt)
    e_temp, _ = temporal_error(fp_tab, q_tab)
    sites = [f"block{i}:out" for i in range(model.n)]
    rows = []
    for t in range(sched.T, 0, -1):
        fp_cap = CaptureRuntime(sites=sites)
        model.eps(traj[t], t, fp_cap)
        q_cap = CaptureRuntime(sites=sites)
        model.eps(traj[t], t, HookedRuntime(rt, {s: _capture_into(q_cap, s) for s in sites}))
        e_non = np.mean([
            cosine_rows(fp_cap.capture[s][0].ravel(), q_cap.capture[s][0].ravel()) for s in sites
        ])
        rows.append({"t": t, "E_temporal": float(e_temp[t - 1]), "E_nontemporal": float(e_non)})
    return rows


def _capture_into(cap: CaptureRuntime, site: str):
    def hook(s, x, tvec):
        cap.capture[site].append(x.data)
        return x

    return hook
