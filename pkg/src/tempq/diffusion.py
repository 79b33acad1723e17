"""DDPM noise schedule, training loop and DDPM/DDIM samplers."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .model import FP, Denoiser, Runtime

DATASETS = ("gaussian-mixture-8", "swiss-roll")


class ScheduleError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays indexed by timestep 0..T.  Index 0 holds the t=0 convention
    (beta=0, alpha=alpha_bar=1, sigma=0); timesteps 1..T are the real ones."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside [1, {self.T}]")
        return t


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule with the fixed posterior variance for sigma."""
    if T < 2:
        raise ScheduleError(f"T must be >= 2, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.zeros(T + 1)
    sigma[1:] = np.sqrt(beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]))
    return NoiseSchedule(T, beta, alpha, alpha_bar, sigma)


def q_sample(x0, t: int, noise, sched: NoiseSchedule) -> np.ndarray:
    t = sched.check_t(t)
    x0, noise = np.asarray(x0, dtype=np.float64), np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ValueError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    ab = sched.alpha_bar[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


# ------------------------------------------------------------------- data


@dataclass
class ToyDataset:
    name: str
    points: np.ndarray
    seed: int


def make_dataset(name: str, count: int = 8000, seed: int = 0) -> ToyDataset:
    rng = np.random.default_rng(seed)
    if name == "gaussian-mixture-8":
        k = rng.integers(0, 8, size=count)
        ang = k * (2 * math.pi / 8)
        centers = 2.0 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        pts = centers + 0.1 * rng.standard_normal((count, 2))
    elif name == "swiss-roll":
        u = 1.5 * math.pi * (1.0 + 2.0 * rng.random(count))
        pts = np.stack([u * np.cos(u), u * np.sin(u)], axis=1) / 7.0
        pts += 0.05 * rng.standard_normal((count, 2))
    else:
        raise ValueError(f"unknown dataset {name!r}; choose from {DATASETS}")
    return ToyDataset(name, pts, seed)


# --------------------------------------------------------------- training


def noise_loss(model: Denoiser, x0: np.ndarray, t: np.ndarray, noise: np.ndarray, sched: NoiseSchedule) -> float:
    ab = sched.alpha_bar[t][:, None]
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
    pred = model.eps(xt, t)
    return float(np.mean((pred - noise) ** 2))


def heldout_batch(data: ToyDataset, sched: NoiseSchedule, size: int = 2048, seed: int = 12345):
    rng = np.random.default_rng([seed, 1])
    idx = rng.integers(0, len(data.points), size=size)
    t = rng.integers(1, sched.T + 1, size=size)
    noise = rng.standard_normal((size, data.points.shape[1]))
    return data.points[idx], t, noise


def train(
    model: Denoiser,
    data: ToyDataset,
    sched: NoiseSchedule,
    steps: int,
    lr: float,
    seed: int,
    batch_size: int = 256,
) -> Denoiser:
    """Plain gradient descent on the noise-prediction MSE.

    Returns a trained copy; initial/final held-out losses land in
    ``model.meta["train"]``.
    """
    if steps < 1:
        raise TrainingError("steps must be >= 1")
    model = model.copy()
    rng = np.random.default_rng([seed, 0])
    held = heldout_batch(data, sched, seed=seed)
    initial = noise_loss(model, *held, sched)
    params = model.params
    for step in range(steps):
        idx = rng.integers(0, len(data.points), size=batch_size)
        t = rng.integers(1, sched.T + 1, size=batch_size)
        noise = rng.standard_normal((batch_size, data.points.shape[1]))
        ab = sched.alpha_bar[t][:, None]
        xt = np.sqrt(ab) * data.points[idx] + np.sqrt(1.0 - ab) * noise
        with ag.GradTape() as tape:
            src = {k: tape.watch(k, v) for k, v in params.items()}
            pred = model.forward(xt, t, FP, src=src)
            loss = ag.mean(ag.mul(ag.sub(pred, noise), ag.sub(pred, noise)))
        if not np.isfinite(loss.data):
            raise TrainingError(f"loss became non-finite at step {step} (lr={lr})")
        grads = ag.backward(loss, tape)
        for k, g in grads.items():
            params[k] = params[k] - lr * g
    final = noise_loss(model, *held, sched)
    if not np.isfinite(final):
        raise TrainingError(f"held-out loss non-finite after {steps} steps (lr={lr})")
    model.meta["train"] = {
        "steps": steps,
        "lr": lr,
        "seed": seed,
        "dataset": data.name,
        "initial_heldout_mse": initial,
        "final_heldout_mse": final,
    }
    return model


# --------------------------------------------------------------- sampling


def denoise_step(model: Denoiser, x_t, t: int, sched: NoiseSchedule, z, rt: Runtime = FP, eps=None) -> np.ndarray:
    """One ancestral DDPM step; ``z`` is ignored (treated as 0) at t == 1."""
    t = sched.check_t(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    if eps is None:
        eps = model.eps(x_t, t, rt)
    mean = (x_t - sched.beta[t] / math.sqrt(1.0 - sched.alpha_bar[t]) * eps) / math.sqrt(sched.alpha[t])
    if t == 1:
        return mean
    return mean + sched.sigma[t] * np.asarray(z, dtype=np.float64)


def ddim_timesteps(T: int, steps: int) -> list[int]:
    if not 1 <= steps <= T:
        raise ScheduleError(f"ddim_steps must be in [1, {T}]")
    ts = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    return [int(t) for t in ts[::-1]]


def ddim_step(eps, x_t, t: int, t_prev: int, sched: NoiseSchedule, eta: float = 0.0, z=None) -> np.ndarray:
    """Generalised DDIM update from t to t_prev (t_prev = 0 means the data end).

    ``eta = 0`` is the deterministic sampler; ``eta = 1`` with consecutive
    timesteps reproduces the ancestral DDPM step.
    """
    ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t_prev]
    x0 = (x_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
    sig = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev))
    out = math.sqrt(ab_prev) * x0 + math.sqrt(max(1.0 - ab_prev - sig * sig, 0.0)) * eps
    if sig > 0:
        out = out + sig * z
    return out


def initial_noise(count: int, dim: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 2]).standard_normal((count, dim))


def sample(
    model: Denoiser,
    count: int,
    sched: NoiseSchedule,
    sampler: str = "ddpm",
    ddim_steps: int | None = None,
    seed: int = 0,
    rt: Runtime = FP,
    return_trajectory: bool = False,
):
    """Generate ``count`` points.  Deterministic given ``seed``.

    With ``return_trajectory`` also returns ``{t: x_t}`` for every visited t.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    dim = model.arch.data_dim
    x = initial_noise(count, dim, seed)
    traj = {}
    if sampler == "ddpm":
        noise_rng = np.random.default_rng([seed, 3])
        for t in range(sched.T, 0, -1):
            traj[t] = x
            z = noise_rng.standard_normal((count, dim)) if t > 1 else np.zeros((count, dim))
            x = denoise_step(model, x, t, sched, z, rt)
    elif sampler == "ddim":
        ts = ddim_timesteps(sched.T, ddim_steps or sched.T)
        for k, t in enumerate(ts):
            traj[t] = x
            t_prev = ts[k + 1] if k + 1 < len(ts) else 0
            x = ddim_step(model.eps(x, t, rt), x, t, t_prev, sched)
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    return (x, traj) if return_trajectory else x


def capture_temporal_features(model: Denoiser, sched: NoiseSchedule | None = None, rt: Runtime = FP, ts=None) -> np.ndarray:
    """(len(ts), n, width) table of X_{t,i} = g_i(h(t)) as seen through ``rt``.

    Evaluated one timestep at a time so every entry is computed exactly as
    it would be inside a single-timestep forward pass.  ``ts`` defaults to
    1..T.
    """
    T = model.T if sched is None else sched.T
    ts = range(1, T + 1) if ts is None else ts
    rows = []
    with ag.no_grad():
        for t in ts:
            feats = rt.temporal_features(model, np.array([int(t)]))
            rows.append(np.stack([f.data[0] for f in feats]))
    return np.stack(rows)
