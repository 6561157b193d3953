"""Experiment configuration as an INI-style key-value file.

Every section maps onto one dataclass; values are typed by the dataclass
field (int, float, bool, str, or comma-separated int tuples). ``to_text``
writes every key with its current value, so the file copied into a run
directory is a complete record of the run.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields

from .pipeline import PipelineOptions
from .pretrain import PretrainConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class CorpusConfig:
    n_train: int = 2000
    n_val: int = 400
    size: int = 64


@dataclass
class NetworkConfig:
    task_widths: tuple = (16, 32, 64)
    restorer_width: int = 16
    denoiser_width: int = 16
    emb_dim: int = 32
    anchored_denoiser: bool = True
    codec: str = "identity"
    latent_channels: int = 8
    codec_width: int = 16
    freeze_decoder: bool = False


@dataclass
class EvalConfig:
    runs: int = 4
    n_values: tuple = (1,)
    chunk: int = 50


@dataclass
class AblationConfig:
    step_sweep: tuple = (1, 4, 30, 50)
    N: int = 300


@dataclass
class ExperimentConfig:
    name: str = "default"
    seed: int = 0
    mixture: str = "B"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    networks: NetworkConfig = field(default_factory=NetworkConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineOptions = field(default_factory=PipelineOptions)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def resolved(self) -> "ExperimentConfig":
        """Copy with seed and mixture pushed down into the stage configs."""
        out = dataclasses.replace(self)
        out.pretrain = dataclasses.replace(self.pretrain, seed=self.seed, mixture=self.mixture)
        out.train = dataclasses.replace(self.train, seed=self.seed, mixture=self.mixture)
        return out


SECTIONS = ("corpus", "networks", "pretrain", "train", "pipeline", "eval", "ablation")
# owned by [experiment]; not written in the stage sections
_DERIVED = {"pretrain": {"seed", "mixture"}, "train": {"seed", "mixture"}}

HEADER = """\
# taskrestore experiment config
# [experiment] holds the run name, master seed and degradation mixture (A|B);
# seed and mixture are propagated to [pretrain] and [train].
# Tuples are comma separated; booleans are true/false.
"""


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _section_items(obj, skip=()):
    return [(f.name, getattr(obj, f.name)) for f in fields(obj) if f.name not in skip]


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case sensitive: N (iterations) vs n (steps)
    return cp


def to_text(cfg: ExperimentConfig) -> str:
    cp = _parser()
    cp["experiment"] = {"name": cfg.name, "seed": str(cfg.seed), "mixture": cfg.mixture}
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        cp[sec] = {k: _format(v) for k, v in _section_items(obj, _DERIVED.get(sec, ()))}
    buf = io.StringIO()
    cp.write(buf)
    return HEADER + "\n" + buf.getvalue()


def from_text(text: str) -> ExperimentConfig:
    cp = _parser()
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    unknown = set(cp.sections()) - set(SECTIONS) - {"experiment"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    cfg = ExperimentConfig()
    if cp.has_section("experiment"):
        e = cp["experiment"]
        for key in e:
            if key not in ("name", "seed", "mixture"):
                raise ConfigError(f"[experiment]: unknown key {key!r}")
        cfg.name = e.get("name", cfg.name)
        cfg.seed = _parse(e.get("seed", str(cfg.seed)), 0, "[experiment] seed")
        cfg.mixture = e.get("mixture", cfg.mixture).upper()
    if cfg.mixture not in ("A", "B"):
        raise ConfigError(f"mixture must be A or B, got {cfg.mixture!r}")
    for sec in SECTIONS:
        if not cp.has_section(sec):
            continue
        obj = getattr(cfg, sec)
        defaults = dict(_section_items(obj))
        updates = {}
        for key, raw in cp[sec].items():
            if key not in defaults or key in _DERIVED.get(sec, ()):
                raise ConfigError(f"[{sec}]: unknown key {key!r}")
            updates[key] = _parse(raw, defaults[key], f"[{sec}] {key}")
        try:
            setattr(cfg, sec, dataclasses.replace(obj, **updates))
        except (TypeError, ValueError) as err:
            raise ConfigError(f"[{sec}]: {err}") from None
    return cfg


def load(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err.strerror}") from None
    return from_text(text)


def save(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(to_text(cfg))
