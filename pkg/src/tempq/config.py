"""Experiment configuration: nested dataclasses loaded from JSON plus overrides."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .diffusion import DATASETS
from .maintenance import SELECTION_LOSSES
from .quant import ESTIMATORS

STRATEGIES = ("baseline", "freeze", "tm", "cm", "ds")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    data_dim: int = 2
    hidden: int = 64
    temb_dim: int = 32
    n_blocks: int = 4
    T: int = 100
    base: float = 10000.0


@dataclass
class ScheduleConfig:
    beta_start: float = 1e-3
    beta_end: float = 0.2


@dataclass
class DatasetConfig:
    name: str = "gaussian-mixture-8"
    seed: int = 0
    count: int = 8000


@dataclass
class TrainConfig:
    steps: int = 5000
    lr: float = 0.2
    batch_size: int = 256


@dataclass
class QuantConfig:
    w_bits: int = 4
    a_bits: int = 8
    cache_bits: int = 8
    strategy: str = "ds"
    weight_estimator: str = "min-max"
    act_estimator: str = "min-max"
    symmetric_weights: bool = False
    selection_loss: str = "mse"


@dataclass
class OptimConfig:
    tiar_iters: int = 300
    tiar_lr: float = 0.01
    recon_iters: int = 300
    recon_lr: float = 0.01
    recon_batch: int = 32
    cache_iters: int = 300
    cache_lr: float = 0.05


@dataclass
class CalibConfig:
    trajectories: int = 256
    stride: int = 4


@dataclass
class EvalConfig:
    samples: int = 2000
    sampler: str = "ddpm"
    ddim_steps: int = 20
    trajectory_samples: int = 256


@dataclass
class AnalysisConfig:
    lambdas: list = field(default_factory=lambda: [0.0, 0.05, 0.1, 0.2, 0.5])
    sweep_samples: int = 1000
    mismatch_block: int = -1
    proportions: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    calib: CalibConfig = field(default_factory=CalibConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """sha256 over the canonical JSON of every field except the output directory."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def validate(self) -> "ExperimentConfig":
        q, m = self.quant, self.model
        for name in ("w_bits", "a_bits", "cache_bits"):
            if getattr(q, name) < 2:
                raise ConfigError(f"quant.{name} must be >= 2")
        if q.strategy not in STRATEGIES:
            raise ConfigError(f"quant.strategy must be one of {STRATEGIES}, got {q.strategy!r}")
        for name in ("weight_estimator", "act_estimator"):
            if getattr(q, name) not in ESTIMATORS:
                raise ConfigError(f"quant.{name} must be one of {ESTIMATORS}")
        if q.selection_loss not in SELECTION_LOSSES:
            raise ConfigError(f"quant.selection_loss must be one of {SELECTION_LOSSES}")
        if self.dataset.name not in DATASETS:
            raise ConfigError(f"dataset.name must be one of {DATASETS}, got {self.dataset.name!r}")
        if m.T < 2 or m.n_blocks < 1 or m.hidden < 1 or m.temb_dim < 2 or m.temb_dim % 2:
            raise ConfigError("model: need T >= 2, n_blocks >= 1, hidden >= 1 and an even temb_dim")
        if not 0 < self.schedule.beta_start <= self.schedule.beta_end < 1:
            raise ConfigError("schedule: need 0 < beta_start <= beta_end < 1")
        if self.train.steps < 1 or self.train.lr <= 0 or self.train.batch_size < 1:
            raise ConfigError("train: steps, lr and batch_size must be positive")
        o = self.optim
        if min(o.tiar_iters, o.recon_iters, o.cache_iters) < 0 or o.recon_batch < 1:
            raise ConfigError("optim: iteration counts must be >= 0 and recon_batch >= 1")
        if min(o.tiar_lr, o.recon_lr, o.cache_lr) <= 0:
            raise ConfigError("optim: learning rates must be positive")
        if self.calib.trajectories < 1 or not 1 <= self.calib.stride <= m.T:
            raise ConfigError("calib: need trajectories >= 1 and 1 <= stride <= T")
        if self.eval.sampler not in ("ddpm", "ddim") or not 1 <= self.eval.ddim_steps <= m.T:
            raise ConfigError("eval: sampler must be ddpm or ddim with 1 <= ddim_steps <= T")
        if self.eval.samples < 2 or self.eval.trajectory_samples < 1 or self.analysis.sweep_samples < 2:
            raise ConfigError("eval/analysis sample counts too small")
        if any(lam < 0 for lam in self.analysis.lambdas):
            raise ConfigError("analysis.lambdas must be >= 0")
        if any(not 0 <= p <= 1 for p in self.analysis.proportions):
            raise ConfigError("analysis.proportions must lie in [0, 1]")
        return self


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown field {path + '.' if path else ''}{unknown[0]}")
    kwargs = {}
    for name, value in data.items():
        sub = cls.__dataclass_fields__[name].default_factory if name in cls.__dataclass_fields__ else None
        default = sub() if callable(sub) else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict, require_dataset: bool = True) -> ExperimentConfig:
    """Build a config from a (possibly partial) nested dict.

    When ``require_dataset`` is set the dict must name the dataset
    explicitly; all other fields fall back to defaults.
    """
    if require_dataset:
        if "dataset" not in data:
            raise ConfigError("missing required field 'dataset'")
        if not isinstance(data["dataset"], dict) or "name" not in data["dataset"]:
            raise ConfigError("missing required field 'dataset.name'")
    try:
        cfg = _build(ExperimentConfig, data, "")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    _check_types(cfg, ExperimentConfig(), "")
    return cfg


def _check_types(cfg, ref, path):
    for f in fields(ref):
        v, d = getattr(cfg, f.name), getattr(ref, f.name)
        where = f"{path}.{f.name}" if path else f.name
        if is_dataclass(d):
            _check_types(v, d, where)
        elif isinstance(d, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{where} must be true or false")
        elif isinstance(d, int):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{where} must be an integer")
        elif isinstance(d, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{where} must be a number")
            setattr(cfg, f.name, float(v))
        elif isinstance(d, str):
            if not isinstance(v, str):
                raise ConfigError(f"{where} must be a string")
        elif isinstance(d, list):
            if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
                raise ConfigError(f"{where} must be a list of numbers")
            setattr(cfg, f.name, [float(x) for x in v])


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a JSON config file (or start from defaults) and apply dotted overrides."""
    if path is None:
        data = {}
    else:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    for key, value in (overrides or {}).items():
        set_dotted(data, key, value)
    return from_dict(data, require_dataset=path is not None).validate()


def set_dotted(data: dict, key: str, value) -> None:
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a section")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    """``section.field=value``; the value is read as JSON when it parses, else as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
