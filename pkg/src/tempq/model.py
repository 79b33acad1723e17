"""Toy noise-prediction network over 2-D points.

Layout (all linear weights stored as (out_features, in_features))::

    h:        sinusoid(t) -> h/lin1 -> silu -> h/lin2                 (time embed)
    g_i:      silu -> block{i}/emb                                    (embedding layer)
    f_i:      x -> silu -> block{i}/in -> (+ g_i(h(t))) -> silu -> block{i}/mid
                -> silu -> block{i}/out -> (+ x)                      (residual block)
    stem / head: input and output projections

Every forward pass goes through a :class:`Runtime`, which decides what
happens to weights (e.g. fake quantization) and at activation sites
(quantization, capture, noise injection).  The default runtime is the plain
full-precision network.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class Architecture:
    data_dim: int = 2
    hidden: int = 64
    temb_dim: int = 32
    n_blocks: int = 4
    T: int = 100
    base: float = 10000.0


def sinusoidal_embedding(t, dim: int, base: float = 10000.0) -> np.ndarray:
    """(R, dim) cos/sin encoding of integer timesteps."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(base) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


class Runtime:
    """Full-precision behaviour; subclasses override the hooks."""

    def weight(self, name: str, w: ag.Tensor) -> ag.Tensor:
        return w

    def act(self, site: str, x: ag.Tensor, tvec: np.ndarray) -> ag.Tensor:
        return x

    def temporal_features(self, model: "Denoiser", tvec: np.ndarray) -> list[ag.Tensor]:
        return model.temporal_features(tvec, self)


FP = Runtime()


def _linear_names(i: int) -> list[str]:
    return [f"block{i}/in", f"block{i}/mid", f"block{i}/out"]


class Denoiser:
    """epsilon-prediction network with named parameters."""

    def __init__(self, arch: Architecture = Architecture(), params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.arch = arch
        self.params = params if params is not None else self._init_params(seed)
        self.meta: dict = {}
        # h / g_i evaluation counters (instrumentation)
        self.calls = {"h": 0, "g": 0}

    # -- structure -------------------------------------------------------

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        a = self.arch
        shapes = {
            "stem": (a.hidden, a.data_dim),
            "h/lin1": (a.hidden, a.temb_dim),
            "h/lin2": (a.hidden, a.hidden),
        }
        for i in range(a.n_blocks):
            shapes[f"block{i}/emb"] = (a.hidden, a.hidden)
            for name in _linear_names(i):
                shapes[name] = (a.hidden, a.hidden)
        shapes["head"] = (a.data_dim, a.hidden)
        return shapes

    def linear_layers(self) -> list[str]:
        return list(self.layer_shapes())

    @property
    def n(self) -> int:
        return self.arch.n_blocks

    @property
    def T(self) -> int:
        return self.arch.T

    def temporal_layers(self) -> list[str]:
        return ["h/lin1", "h/lin2"] + [f"block{i}/emb" for i in range(self.n)]

    def block_layers(self, i: int) -> list[str]:
        return _linear_names(i)

    def temporal_act_sites(self) -> list[str]:
        sites = ["h/lin1:in", "h/lin2:in"]
        for i in range(self.n):
            sites += [f"block{i}/emb:in", f"block{i}/emb:out"]
        return sites

    def block_act_sites(self, i: int) -> list[str]:
        return [f"{name}:in" for name in _linear_names(i)]

    def nontemporal_sites(self) -> list[str]:
        """Observation sites holding sample-dependent activations."""
        sites = []
        for i in range(self.n):
            sites += self.block_act_sites(i) + [f"block{i}:out"]
        return sites

    def _init_params(self, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        params = {}
        for name, (fan_out, fan_in) in self.layer_shapes().items():
            bound = 1.0 / math.sqrt(fan_in)
            params[f"{name}/w"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            params[f"{name}/b"] = rng.uniform(-bound, bound, size=(fan_out,))
        return params

    def copy(self) -> "Denoiser":
        m = Denoiser(self.arch, {k: v.copy() for k, v in self.params.items()})
        m.meta = json.loads(json.dumps(self.meta))
        return m

    # -- forward ---------------------------------------------------------

    def _lin(self, name: str, x: ag.Tensor, rt: Runtime, tvec, src=None) -> ag.Tensor:
        src = self.params if src is None else src
        x = rt.act(f"{name}:in", x, tvec)
        w = rt.weight(f"{name}/w", _as_param(src[f"{name}/w"]))
        return ag.linear(x, w, _as_param(src[f"{name}/b"]))

    def time_embed(self, tvec, rt: Runtime = FP, src=None) -> ag.Tensor:
        self.calls["h"] += 1
        e = ag.Tensor(sinusoidal_embedding(tvec, self.arch.temb_dim, self.arch.base))
        u = self._lin("h/lin1", e, rt, tvec, src)
        return self._lin("h/lin2", ag.silu(u), rt, tvec, src)

    def embed_layer(self, i: int, hout: ag.Tensor, tvec, rt: Runtime = FP, src=None) -> ag.Tensor:
        self.calls["g"] += 1
        x = self._lin(f"block{i}/emb", ag.silu(hout), rt, tvec, src)
        return rt.act(f"block{i}/emb:out", x, tvec)

    def temporal_features(self, tvec, rt: Runtime = FP, src=None) -> list[ag.Tensor]:
        """X_{t,i} = g_i(h(t)) for each row of ``tvec``; never sees x_t."""
        tvec = np.atleast_1d(tvec)
        hout = self.time_embed(tvec, rt, src)
        return [self.embed_layer(i, hout, tvec, rt, src) for i in range(self.n)]

    def block(self, i: int, x: ag.Tensor, temb: ag.Tensor, tvec, rt: Runtime = FP, src=None) -> ag.Tensor:
        y = self._lin(f"block{i}/in", ag.silu(x), rt, tvec, src)
        y = ag.add(y, temb)
        y = self._lin(f"block{i}/mid", ag.silu(y), rt, tvec, src)
        y = self._lin(f"block{i}/out", ag.silu(y), rt, tvec, src)
        return rt.act(f"block{i}:out", ag.add(x, y), tvec)

    def stem(self, x, rt: Runtime = FP, src=None) -> ag.Tensor:
        src = self.params if src is None else src
        return ag.linear(ag.as_tensor(x), _as_param(src["stem/w"]), _as_param(src["stem/b"]))

    def head(self, x: ag.Tensor, rt: Runtime = FP, src=None) -> ag.Tensor:
        src = self.params if src is None else src
        return ag.linear(ag.silu(x), _as_param(src["head/w"]), _as_param(src["head/b"]))

    def forward(self, x, t, rt: Runtime = FP, src: dict | None = None) -> ag.Tensor:
        """Predict the noise in ``x`` (B x data_dim) at timestep(s) ``t``.

        ``t`` is an int (shared by the batch) or a length-B array.  ``src``
        overrides the parameter source (e.g. tape-watched tensors).
        """
        tvec = np.atleast_1d(np.asarray(t, dtype=np.int64))
        feats = rt.temporal_features(self, tvec) if src is None else self.temporal_features(tvec, rt, src)
        hcur = self.stem(x, rt, src)
        for i in range(self.n):
            hcur = self.block(i, hcur, feats[i], tvec, rt, src)
        return self.head(hcur, rt, src)

    def eps(self, x, t, rt: Runtime = FP) -> np.ndarray:
        with ag.no_grad():
            return self.forward(x, t, rt).data

    # -- persistence -----------------------------------------------------

    def save(self, path: str | os.PathLike) -> tuple[Path, Path]:
        """Write ``<path>.json`` manifest and ``<path>.bin`` little-endian float64 blob."""
        path = Path(path)
        manifest_path, blob_path = path.with_suffix(".json"), path.with_suffix(".bin")
        entries, chunks, offset = [], [], 0
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name], dtype="<f8")
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.tobytes(order="C"))
            offset += arr.nbytes
        manifest = {
            "format": "tempq-checkpoint-1",
            "dtype": "float64-le",
            "blob": blob_path.name,
            "arch": self.arch.__dict__,
            "meta": self.meta,
            "params": entries,
        }
        _atomic_write(blob_path, b"".join(chunks))
        _atomic_write(manifest_path, json.dumps(manifest, indent=1, sort_keys=True).encode())
        return manifest_path, blob_path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Denoiser":
        path = Path(path)
        manifest_path = path.with_suffix(".json")
        try:
            manifest = json.loads(manifest_path.read_text())
            blob = (manifest_path.parent / manifest["blob"]).read_bytes()
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"cannot read checkpoint {manifest_path}: {exc}") from exc
        params = {}
        for e in manifest["params"]:
            count = int(np.prod(e["shape"])) if e["shape"] else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=e["offset"])
            params[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
        model = cls(Architecture(**manifest["arch"]), params)
        model.meta = manifest.get("meta", {})
        return model


def _as_param(v) -> ag.Tensor:
    return v if isinstance(v, ag.Tensor) else ag.Tensor(v)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
