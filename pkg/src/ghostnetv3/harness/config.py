"""Recipe config files: INI-style sections of ``key = value`` lines.

Sections: ``[model]``, ``[data]``, ``[train]``, ``[kd]``, ``[schedule]``,
``[augment]``, ``[optimizer]``. Unknown sections or keys are errors so typos
do not silently fall back to defaults. Relative paths resolve against the
config file's directory. Schedule milestones and warmup are given in epochs.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Optional

from ..ghostnet import ModelSpec, full_spec, mini_spec
from ..training import AugmentConfig, KDConfig, OptimizerConfig, Recipe, ScheduleConfig


class ConfigError(ValueError):
    pass


# desk defaults: the reference recipe's shape with learning rate and EMA decay
# rescaled for small batches and short runs
DESK_LR = 0.03
DESK_EMA = 0.99


@dataclass
class ModelConfig:
    name: str = "mini"
    width: float = 1.0
    rep_branches: int = 3
    rep_1x1: bool = True
    rep_identity: bool = False
    gate_position: str = "output"
    cheap_on_input: bool = False

    def spec(self, num_classes: int, in_channels: int = 3) -> ModelSpec:
        make = {"mini": mini_spec, "full": full_spec}.get(self.name)
        if make is None:
            raise ConfigError(f"unknown model {self.name!r} (expected mini or full)")
        return make(self.width, num_classes, rep_branches=self.rep_branches, rep_1x1=self.rep_1x1,
                    rep_identity=self.rep_identity, gate_position=self.gate_position,
                    cheap_on_input=self.cheap_on_input, in_channels=in_channels)


@dataclass
class DataConfig:
    train: Optional[str] = None         # .gds file
    val: Optional[str] = None
    val_fraction: float = 0.0           # held out from train when ``val`` is unset
    synth_samples: int = 0              # generate in memory instead of reading files
    synth_val: int = 0
    synth_seed: int = 0


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    workers: int = 0
    ema_decay: float = DESK_EMA
    eval_batch: int = 256
    output_dir: str = "."


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    kd: KDConfig = field(default_factory=KDConfig)
    schedule: Dict[str, object] = field(default_factory=lambda: {"kind": "cosine", "lr_max": DESK_LR})
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    base_dir: str = "."

    def resolve(self, path: Optional[str]) -> Optional[str]:
        if path is None or os.path.isabs(path):
            return path
        return os.path.join(self.base_dir, path)

    def recipe(self, steps_per_epoch: int) -> Recipe:
        """Training recipe with epoch-denominated schedule fields converted to steps."""
        s = dict(self.schedule)
        milestones = tuple(int(round(float(m) * steps_per_epoch)) for m in s.pop("milestones", ()))
        warmup = int(round(float(s.pop("warmup_epochs", 0)) * steps_per_epoch))
        sched = ScheduleConfig(milestones=milestones, warmup_steps=warmup, **s)
        t = self.train
        return Recipe(kd=self.kd, schedule=sched, augment=self.augment, optimizer=self.optimizer,
                      ema_decay=t.ema_decay, epochs=t.epochs, batch_size=t.batch_size, seed=t.seed,
                      workers=t.workers, eval_batch=t.eval_batch)

    def to_dict(self) -> dict:
        d = {k: asdict(getattr(self, k)) for k in ("model", "data", "train", "kd", "augment", "optimizer")}
        d["schedule"] = dict(self.schedule)
        return d


def _convert(raw: str, default, name: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return {"1": True, "true": True, "yes": True, "on": True,
                    "0": False, "false": False, "no": False, "off": False}[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p for p in raw.replace(",", " ").split() if p]
            return tuple(float(p) for p in parts)
    except (KeyError, ValueError):
        raise ConfigError(f"{name}: cannot parse {raw!r} as {type(default).__name__}") from None
    if raw.lower() in ("", "none"):
        return None
    return raw


def _fill(cls, section, name):
    known = {f.name: f for f in fields(cls)}
    proto = cls()
    kw = {}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"[{name}] unknown key {key!r}; expected one of {sorted(known)}")
        kw[key] = _convert(raw, getattr(proto, key), f"[{name}] {key}")
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}] {e}") from None


_SCHEDULE_KEYS = {"kind": "cosine", "lr_max": DESK_LR, "lr_min": 0.0, "factor": 0.1,
                  "milestones": (), "warmup_epochs": 0.0}


def parse_config(text: str, base_dir: str = ".") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    sections = {"model": ModelConfig, "data": DataConfig, "train": TrainConfig, "kd": KDConfig,
                "augment": AugmentConfig, "optimizer": OptimizerConfig}
    unknown = set(cp.sections()) - set(sections) - {"schedule"}
    if unknown:
        raise ConfigError(f"unknown section(s) {sorted(unknown)}")
    cfg = RunConfig(base_dir=base_dir)
    for name, cls in sections.items():
        if cp.has_section(name):
            setattr(cfg, name, _fill(cls, cp[name], name))
    if cp.has_section("schedule"):
        sched = dict(cfg.schedule)
        for key, raw in cp["schedule"].items():
            if key not in _SCHEDULE_KEYS:
                raise ConfigError(f"[schedule] unknown key {key!r}; expected one of {sorted(_SCHEDULE_KEYS)}")
            sched[key] = _convert(raw, _SCHEDULE_KEYS[key], f"[schedule] {key}")
        cfg.schedule = sched
    try:
        cfg.recipe(1)   # validate the schedule eagerly
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[schedule] {e}") from None
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path) as f:
        text = f.read()
    return parse_config(text, os.path.dirname(os.path.abspath(path)))


def apply_overrides(cfg: RunConfig, seed: Optional[int] = None) -> RunConfig:
    if seed is not None:
        cfg.train.seed = seed
    return cfg

