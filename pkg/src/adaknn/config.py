"""INI experiment configuration; every key is also a ``--section.key`` command-line flag."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


@dataclass
class TaskSection:
    seed: int | None = None
    vocab_size: int = 96
    n_domains: int = 2
    src_per_domain: int = 16
    src_overlap: int = 4
    tgt_per_domain: int = 24
    tgt_overlap: int = 8
    share: float = 0.7
    peak: float = 0.95
    n_alt: int = 1
    noise_rate: float = 0.1
    branching: int = 4
    prev_sensitivity: float = 0.6
    min_len: int = 6
    max_len: int = 12
    n_general: int = 20000
    n_train: int = 1000
    n_dev: int = 2000
    n_test: int = 2000


@dataclass
class EncoderSection:
    dim: int = 16
    window: int = 2
    decay: float = 1.0
    seed: int | None = None


@dataclass
class BaseSection:
    smoothing: float = 0.01
    use_source: bool = True


@dataclass
class DatastoreSection:
    metric: str = "squared"
    n_centroids: int = 64
    ivf_iters: int = 20
    ivf_seed: int | None = None
    nprobe: int = 0  # 0 probes every list, i.e. exact search
    exclude_self: bool = False  # drop a query's own entry when training on the datastore's corpus


@dataclass
class KnnSection:
    K: int = 32
    temperature: float = 2.0
    lam: float = 0.7


@dataclass
class MetakSection:
    hidden: int = 32
    steps: int = 5000
    batch_size: int = 32
    lr: float = 3e-4
    seed: int | None = None
    feature_mask: str = "full"
    standardize: bool = False
    nonlinearity: str = "relu"
    train_split: str = "dev"


@dataclass
class DecodeSection:
    mode: str = "beam"
    beam: int = 4
    lenpen: float = 0.6
    variant: str = "adaptive"
    batch_size: int = 32
    check: bool = False


@dataclass
class RunSection:
    workdir: str = "runs/default"
    domain: str = "d0"  # domain whose datastore and dev set are used
    test_domain: str = ""  # defaults to ``domain``
    split: str = "test"
    timing_sentences: int = 64


@dataclass
class ExperimentConfig:
    task: TaskSection = field(default_factory=TaskSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    base: BaseSection = field(default_factory=BaseSection)
    datastore: DatastoreSection = field(default_factory=DatastoreSection)
    knn: KnnSection = field(default_factory=KnnSection)
    metak: MetakSection = field(default_factory=MetakSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    run: RunSection = field(default_factory=RunSection)

    SEEDS = (("task", "seed"), ("encoder", "seed"), ("datastore", "ivf_seed"), ("metak", "seed"))

    def sections(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def items(self):
        for name, section in self.sections().items():
            for f in fields(section):
                yield name, f.name, f.type, getattr(section, f.name)

    def set(self, section: str, key: str, raw: str) -> None:
        sec = self.sections().get(section)
        if sec is None:
            raise ConfigError(f"unknown config section [{section}]")
        types = {f.name: f.type for f in fields(sec)}
        if key not in types:
            raise ConfigError(f"unknown config key {section}.{key}")
        value = _parse(raw, types[key], f"{section}.{key}")
        allowed = CHOICES.get((section, key))
        if allowed and value not in allowed:
            raise ConfigError(f"{section}.{key} must be one of {', '.join(allowed)}, got {value!r}")
        setattr(sec, key, value)

    def check_seeds(self) -> None:
        missing = [f"{s}.{k}" for s, k in self.SEEDS if getattr(getattr(self, s), k) is None]
        if missing:
            raise ConfigError("missing mandatory seed(s): " + ", ".join(missing))

    @property
    def workdir(self) -> Path:
        return Path(self.run.workdir)

    @property
    def test_domain(self) -> str:
        return self.run.test_domain or self.run.domain

    def to_ini(self) -> str:
        lines = []
        for name, section in self.sections().items():
            lines.append(f"[{name}]")
            for f in fields(section):
                value = getattr(section, f.name)
                if value is not None:
                    lines.append(f"{f.name} = {str(value).lower() if isinstance(value, bool) else value}")
            lines.append("")
        return "\n".join(lines)


class ConfigError(ValueError):
    pass


# the test split is never used for training
CHOICES = {("metak", "train_split"): ("train", "dev")}


def _parse(raw: str, type_name: str, where: str):
    raw = raw.strip()
    try:
        if type_name.startswith("bool"):
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if type_name.startswith("int"):
            return int(raw)
        if type_name.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type_name}") from None
    return raw


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keep key case (e.g. K)
        parser.read(path)
        for section in parser.sections():
            for key, raw in parser[section].items():
                cfg.set(section, key, raw)
    for dotted, raw in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        cfg.set(section, key, raw)
    return cfg
