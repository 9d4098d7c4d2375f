"""Run configuration and its flat ``section.key = value`` text format.

Example::

    # comments and blank lines are ignored
    train.mode = biphasic
    train.batch_size = 16
    domain.groups = color: black blond brown
    domain.flags = makeup age

Unknown keys, malformed lines and values of the wrong type are errors that
name the offending line.  :func:`dump_config` writes every key, so a
snapshot fully determines the run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .nets import ResolutionPlan
from .toydata import DomainSpec

MODES = ("biphasic", "single_phase", "progressive", "ordinary_reg", "no_mi", "cycle")
UNIMPLEMENTED_MODES = ("mine",)


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    seed: int = 0
    n_identities: int = 200
    per_identity: int = 10
    test_identities: int = 50
    external_identities: int = 100
    external_per_identity: int = 10


@dataclass
class NetConfig:
    g1_channels: int = 16
    g1_res_blocks: int = 3
    g2_channels: int = 16
    g2_res_blocks: int = 2
    t_channels: int = 32
    d_channels: int = 16
    duv_channels: int = 16
    da_channels: int = 32
    phi_channels: int = 32
    embed_dim: int = 32


@dataclass
class PretrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    phi_steps: int = 600
    aux_steps: int = 500
    clas_steps: int = 600
    phi_blur: float = 0.0
    holdout_per_identity: int = 2
    warm_start_aux: bool = True
    dir: str = ""


@dataclass
class TrainConfig:
    mode: str = "biphasic"
    family: str = "lsgan"
    batch_size: int = 16
    steps_initial: int = 2000
    steps_enhancing: int = 2000
    seed: int = 0
    lr: float = 1e-4
    flip_p: float = 0.5
    use_mi: bool = True
    exclude_geometry: bool = False
    d_init: str = "fresh"
    fade_fraction: float = 0.1
    threads: int = 1


@dataclass
class EvalConfig:
    every: int = 500
    samples: int = 500  # capped at the test split size; the default covers all of it
    seed: int = 0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    nets: NetConfig = field(default_factory=NetConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    domain: DomainSpec = field(default_factory=DomainSpec)
    plan: ResolutionPlan = field(default_factory=ResolutionPlan)

    def validate(self) -> "RunConfig":
        t = self.train
        if t.mode in UNIMPLEMENTED_MODES:
            raise NotImplementedError(f"mode {t.mode!r} is not implemented")
        if t.mode not in MODES:
            raise ConfigError(f"unknown mode {t.mode!r}; expected one of {', '.join(MODES)}")
        if t.family not in ("vanilla", "lsgan"):
            raise ConfigError(f"unknown objective family {t.family!r}")
        if t.d_init not in ("fresh", "teacher"):
            raise ConfigError(f"train.d_init must be 'fresh' or 'teacher', got {t.d_init!r}")
        if t.batch_size < 1 or self.pretrain.batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if min(t.steps_initial, t.steps_enhancing) < 0:
            raise ConfigError("step counts must be non-negative")
        if not 0.0 <= t.flip_p <= 1.0:
            raise ConfigError(f"train.flip_p must be in [0, 1], got {t.flip_p}")
        if not 0.0 <= self.pretrain.phi_blur <= 1.0:
            raise ConfigError(f"pretrain.phi_blur must be in [0, 1], got {self.pretrain.phi_blur}")
        if not 0.0 <= t.fade_fraction <= 1.0:
            raise ConfigError(f"train.fade_fraction must be in [0, 1], got {t.fade_fraction}")
        if t.threads < 1:
            raise ConfigError("train.threads must be >= 1")
        if self.eval.every < 1 or self.eval.samples < 1:
            raise ConfigError("eval.every and eval.samples must be positive")
        return self


# -- parsing ------------------------------------------------------------------

_SECTIONS = ("data", "nets", "pretrain", "train", "eval")


def _coerce(raw: str, kind: Any, where: str) -> Any:
    if kind in (bool, "bool"):
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"{where}: expected true/false, got {raw!r}")
    if kind in (int, "int"):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None
    if kind in (float, "float"):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from None
    return raw


def _parse_groups(raw: str, where: str) -> tuple[tuple[str, tuple[str, ...]], ...]:
    groups = []
    for chunk in filter(None, (c.strip() for c in raw.split(";"))):
        name, sep, values = chunk.partition(":")
        vals = tuple(values.split())
        if not sep or not name.strip() or len(vals) < 2:
            raise ConfigError(f"{where}: groups look like 'name: v1 v2 ...; name2: ...', got {chunk!r}")
        groups.append((name.strip(), vals))
    return tuple(groups)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values: dict[str, dict[str, Any]] = {s: {} for s in _SECTIONS}
    groups, flags, plan = None, None, {}
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        where = f"{source}:{lineno}"
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, raw = body.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"{where}: expected 'section.key = value', got {line.strip()!r}")
        if key in seen:
            raise ConfigError(f"{where}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        section, _, name = key.partition(".")
        if key == "domain.groups":
            groups = _parse_groups(raw, where)
        elif key == "domain.flags":
            flags = tuple(raw.split())
        elif section == "plan" and name in ("initial_hw", "full_hw"):
            plan[name] = _coerce(raw, int, where)
        elif section in values:
            kinds = {f.name: f.type for f in dataclasses.fields(_section_type(section))}
            if name not in kinds:
                raise ConfigError(f"{where}: unknown key {key!r}")
            values[section][name] = _coerce(raw, kinds[name], where)
        else:
            raise ConfigError(f"{where}: unknown key {key!r}")
    cfg = RunConfig(**{s: _section_type(s)(**v) for s, v in values.items()})
    default = DomainSpec()
    cfg.domain = DomainSpec(groups=groups if groups is not None else default.groups, flags=flags if flags is not None else default.flags)
    try:
        cfg.plan = ResolutionPlan(**plan)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def _section_type(section: str) -> type:
    return {"data": DataConfig, "nets": NetConfig, "pretrain": PretrainConfig, "train": TrainConfig, "eval": EvalConfig}[section]


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in _SECTIONS:
        for f in dataclasses.fields(getattr(cfg, section)):
            value = getattr(getattr(cfg, section), f.name)
            text = ("true" if value else "false") if isinstance(value, bool) else str(value)
            lines.append(f"{section}.{f.name} = {text}")
    groups = "; ".join(f"{name}: {' '.join(vals)}" for name, vals in cfg.domain.groups)
    lines.append(f"domain.groups = {groups}")
    lines.append(f"domain.flags = {' '.join(cfg.domain.flags)}")
    lines.append(f"plan.initial_hw = {cfg.plan.initial_hw}")
    lines.append(f"plan.full_hw = {cfg.plan.full_hw}")
    return "\n".join(lines) + "\n"
