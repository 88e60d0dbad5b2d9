"""Run configuration: one TOML document with a section per stage."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .errors import ConfigError
from .evaluation import FedConfig
from .glo import TrainingConfig
from .sampler import SamplerConfig
from .text_features import ENDPOINT_ENV

ABLATIONS = ("wo_sem", "wo_sent", "wo_sn", "wo_glo", "wo_gcn", "wo_knn")


@dataclass
class PathsConfig:
    manifest: str = ""
    topology: str = ""  # empty: packaged default (or rebuilt for wo_knn)
    output_dir: str = "runs/default"
    glo_checkpoint: str = ""
    sampler_checkpoint: str = ""
    fed_checkpoint: str = ""
    feature_cache: str = ""


@dataclass
class PreprocessConfig:
    frames: int = 64
    min_cutoff: float = 1.0
    beta: float = 0.007
    d_cutoff: float = 1.0


@dataclass
class AblationConfig:
    wo_sem: bool = False
    wo_sent: bool = False
    wo_sn: bool = False
    wo_glo: bool = False
    wo_gcn: bool = False
    wo_knn: bool = False

    def active(self):
        return [name for name in ABLATIONS if getattr(self, name)]


@dataclass
class BackendConfig:
    kind: str = "stub"  # "stub" | "http"
    seed: int = 0
    endpoint: str = ""
    timeout: float = 30.0
    retries: int = 3


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    glo: TrainingConfig = field(default_factory=TrainingConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)

    def __post_init__(self):
        if self.ablation.wo_sn and self.ablation.wo_glo:
            raise ConfigError("wo_sn needs a GLO latent bank; it cannot be combined with wo_glo")
        if self.backend.kind not in ("stub", "http"):
            raise ConfigError(f"unknown backend kind {self.backend.kind!r}")
        # the sampler's input masks follow the ablation section
        self.sampler.wo_sem = self.ablation.wo_sem
        self.sampler.wo_sent = self.ablation.wo_sent
        self.glo.decoder = "mlp" if self.ablation.wo_gcn else "stgcn"

    @property
    def output_dir(self) -> Path:
        return Path(self.paths.output_dir)

    def artifact(self, name) -> Path:
        explicit = getattr(self.paths, f"{name}_checkpoint")
        return Path(explicit) if explicit else self.output_dir / f"{name}.safetensors"

    def set_seed(self, seed: int):
        self.glo.seed = self.sampler.seed = self.fed.seed = seed

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def write_snapshot(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_toml())


def _build(cls, data, where):
    where = where or "top level"
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if dataclasses.is_dataclass(cls) else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, name if where == "top level" else f"{where}.{name}")
        else:
            if isinstance(default, bool) and not isinstance(value, bool):
                raise ConfigError(f"{where}.{name} must be a boolean")
            if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if default is not None and not isinstance(value, type(default)):
                raise ConfigError(f"{where}.{name} must be {type(default).__name__}, got {value!r}")
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{where}] section: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    endpoint = os.environ.get(ENDPOINT_ENV)
    if endpoint:
        cfg.backend.endpoint = endpoint
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        return config_from_dict({})
    try:
        data = tomli.loads(Path(path).read_text())
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)
