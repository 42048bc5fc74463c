"""Run configuration: flat ``section.key = value`` files plus environment overrides."""
from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .ingest import read_kv_file
from .kgraph import WalkConfig, parse_edge_types
from .synthgen import SynthConfig
from .train import TrainConfig

ENV_PREFIX = "SWARMRANK_"


class ConfigError(ValueError):
    """A configuration key or value is invalid."""


@dataclass(frozen=True)
class DataSection:
    manifest: str = ""
    top_m: int = 5000
    train_cutoff: dt.date = dt.date(2020, 1, 1)
    val_cutoff: dt.date = dt.date(2020, 7, 1)


@dataclass(frozen=True)
class FeaturizeSection:
    text_dim: int = 256
    min_df: int = 2
    max_df_ratio: float = 0.9
    pretrained_path: str = ""


@dataclass(frozen=True)
class GraphSection:
    edge_types: str = "all"

    def __post_init__(self):
        parse_edge_types(self.edge_types)


@dataclass(frozen=True)
class ModelSection:
    n_layers: int = 2
    msg_dim: int = 128
    hidden_dim: int = 128
    embed_dim: int = 64


@dataclass(frozen=True)
class RankSection:
    lam: float = 0.5
    k: int = 0


@dataclass(frozen=True)
class BenchSection:
    ks: tuple[int, ...] = (50, 100, 200)
    sample_size: int = 0
    references: bool = True


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    outdir: str = "runs/default"
    deterministic: bool = False
    threads: int = 0


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    synth: SynthConfig = field(default_factory=SynthConfig)
    featurize: FeaturizeSection = field(default_factory=FeaturizeSection)
    graph: GraphSection = field(default_factory=GraphSection)
    walk: WalkConfig = field(default_factory=WalkConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    rank: RankSection = field(default_factory=RankSection)
    bench: BenchSection = field(default_factory=BenchSection)
    run: RunSection = field(default_factory=RunSection)

    @property
    def outdir(self) -> Path:
        return Path(self.run.outdir)

    @property
    def manifest_path(self) -> Path:
        return Path(self.data.manifest) if self.data.manifest else self.outdir / "corpus" / "manifest.txt"

    @property
    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.run.seed)

    def items(self) -> list[tuple[str, str]]:
        out = []
        for sec in dataclasses.fields(self):
            section = getattr(self, sec.name)
            for f in dataclasses.fields(section):
                out.append((f"{sec.name}.{f.name}", _render(getattr(section, f.name))))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    def training_hash(self, corpus_hash: str) -> str:
        """Hash of everything that determines a trained checkpoint."""
        keep = ("data.top_m", "data.train_cutoff", "data.val_cutoff", "featurize.", "graph.", "walk.", "model.",
                "train.", "run.seed")
        lines = [f"{k}={v}" for k, v in self.items() if k.startswith(keep) and k != "train.seed"]
        lines.append(f"corpus={corpus_hash}")
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]

    def full_hash(self, corpus_hash: str) -> str:
        skip = ("run.outdir", "run.threads", "data.manifest")
        lines = [f"{k}={v}" for k, v in self.items() if k not in skip] + [f"corpus={corpus_hash}"]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


def _render(value) -> str:
    if isinstance(value, dt.date):
        return value.isoformat()
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _convert(section_cls, name: str, raw: str):
    hints = typing.get_type_hints(section_cls)
    hint = hints[name]
    if hint is bool:
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return low in ("1", "true", "yes")
    if hint is dt.date:
        return dt.date.fromisoformat(raw.strip())
    if typing.get_origin(hint) is tuple:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return hint(raw.strip())


def build_config(values: Mapping[str, str]) -> RunConfig:
    """Apply ``section.key`` string overrides to the defaults."""
    base = RunConfig()
    sections = {f.name: f for f in dataclasses.fields(RunConfig)}
    grouped: dict[str, dict[str, object]] = {}
    for key, raw in values.items():
        if "." not in key:
            raise ConfigError(f"config key {key!r} needs a section prefix such as 'train.'")
        sec, name = key.split(".", 1)
        if sec not in sections:
            raise ConfigError(f"unknown config section in {key!r}")
        section_cls = type(getattr(base, sec))
        if name not in {f.name for f in dataclasses.fields(section_cls)}:
            raise ConfigError(f"unknown config field {key!r}")
        if key == "train.seed":
            raise ConfigError("train.seed is derived from run.seed; set run.seed instead")
        try:
            grouped.setdefault(sec, {})[name] = _convert(section_cls, name, raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    updates = {}
    for sec, kwargs in grouped.items():
        try:
            updates[sec] = dataclasses.replace(getattr(base, sec), **kwargs)
        except ValueError as exc:
            raise ConfigError(f"invalid [{sec}] settings ({', '.join(sorted(kwargs))}): {exc}") from exc
    return dataclasses.replace(base, **updates)


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    """``SWARMRANK_TRAIN__MARGIN=0.3`` becomes ``train.margin = 0.3``."""
    environ = os.environ if environ is None else environ
    out = {}
    for key, value in environ.items():
        if key.startswith(ENV_PREFIX) and "__" in key:
            sec, name = key[len(ENV_PREFIX):].lower().split("__", 1)
            out[f"{sec}.{name}"] = value
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[str, str] = (),
                environ: Mapping[str, str] | None = None) -> RunConfig:
    """Defaults, then the file, then environment variables, then explicit overrides."""
    values: dict[str, str] = {}
    if path is not None:
        values.update(read_kv_file(path))
    values.update(env_overrides(environ))
    values.update(dict(overrides))
    return build_config(values)
