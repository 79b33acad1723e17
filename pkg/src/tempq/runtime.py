"""Runtimes that fake-quantize a :class:`~tempq.model.Denoiser` in place.

A runtime sees every weight and activation site during a forward pass.
:class:`QuantRuntime` applies a :class:`QuantParamSet`; trainable quant
params can be swapped in as tape tensors for reconstruction.
"""
from __future__ import annotations

from collections import defaultdict
from typing import Callable

import numpy as np

from . import autograd as ag
from .model import Denoiser, Runtime
from .quant import QuantParams, QuantParamSet, fake_quant


class QuantRuntime(Runtime):
    """Fake quantization driven by a param set.

    ``trainable`` maps weight names to ``(s, z, qmax)`` tape tensors that
    replace the stored params.  ``capture`` collects activations per site
    (before quantization).  ``quantize_acts=False`` leaves activations in
    full precision (weight-only mode).
    """

    def __init__(
        self,
        qset: QuantParamSet,
        trainable: dict[str, tuple[ag.Tensor, ag.Tensor, int]] | None = None,
        quantize_acts: bool = True,
        capture: dict[str, list] | None = None,
        hooks: dict[str, Callable] | None = None,
    ):
        self.qset = qset
        self.trainable = trainable or {}
        self.quantize_acts = quantize_acts
        self.capture = capture
        self.hooks = hooks or {}
        self._wcache: dict[str, ag.Tensor] = {}
        self._tables: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}
        for site, v in qset.activations.items():
            if isinstance(v, list):
                self._tables[site] = (
                    np.array([p.s for p in v], dtype=np.float64),
                    np.array([p.z for p in v], dtype=np.int64),
                    v[0].b,
                )

    def weight(self, name, w):
        if name in self.trainable:
            s, z, qmax = self.trainable[name]
            return ag.fake_quant(w, s, z, qmax, axis=0)
        p = self.qset.weights.get(name)
        if p is None:
            return w
        if w.tracked:
            return fake_quant(w, p)
        cached = self._wcache.get(name)
        if cached is None:
            cached = ag.Tensor(fake_quant(w.data, p))
            self._wcache[name] = cached
        return cached

    def act_params(self, site: str, tvec) -> QuantParams | None:
        table = self._tables.get(site)
        if table is not None:
            s, z, b = table
            idx = np.asarray(tvec, dtype=np.int64) - 1
            return QuantParams(s[idx], z[idx], b, axis=0)
        return self.qset.activations.get(site)

    def act(self, site, x, tvec):
        if self.capture is not None:
            self.capture[site].append(x.data)
        hook = self.hooks.get(site)
        if hook is not None:
            x = hook(site, x, tvec)
        if not self.quantize_acts:
            return x
        p = self.act_params(site, tvec)
        if p is None:
            return x
        if p.axis == 0 and x.shape[0] != p.s.shape[0]:
            raise ValueError(f"site {site}: per-timestep params for {p.s.shape[0]} rows, got {x.shape[0]}")
        return fake_quant(x, p)


class CaptureRuntime(Runtime):
    """Full precision, recording activations (and optional hooks)."""

    def __init__(self, sites=None, hooks: dict[str, Callable] | None = None):
        self.sites = None if sites is None else set(sites)
        self.capture: dict[str, list] = defaultdict(list)
        self.hooks = hooks or {}

    def act(self, site, x, tvec):
        hook = self.hooks.get(site)
        if hook is not None:
            x = hook(site, x, tvec)
        if self.sites is None or site in self.sites:
            self.capture[site].append(x.data)
        return x


class HookedRuntime(Runtime):
    """Wrap another runtime and run hooks on top of it (e.g. noise injection)."""

    def __init__(self, inner: Runtime, hooks: dict[str, Callable]):
        self.inner = inner
        self.hooks = hooks

    def weight(self, name, w):
        return self.inner.weight(name, w)

    def _hook(self, site, x, tvec):
        hook = self.hooks.get(site)
        return x if hook is None else hook(site, x, tvec)

    def act(self, site, x, tvec):
        return self._hook(site, self.inner.act(site, x, tvec), tvec)

    def temporal_features(self, model: Denoiser, tvec):
        if type(self.inner).temporal_features is Runtime.temporal_features:
            return model.temporal_features(tvec, self)
        # the inner runtime sources the features itself (e.g. from a cache)
        feats = self.inner.temporal_features(model, tvec)
        return [self._hook(f"block{i}/emb:out", f, tvec) for i, f in enumerate(feats)]
