"""Run configuration: nested dataclasses, strict JSON loading, ablation flags."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .nn import NetworkSpec
from .obs import ObsConfig
from .sac import SacConfig
from .sim import SimConfig

ABLATIONS = ("no_boxcast", "no_raycast", "no_abs_position", "no_lstm", "no_curriculum", "her")


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every offending key."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass(frozen=True)
class CurriculumConfig:
    start_radius: float = 5.0
    radius_step: float = 5.0
    radius_max: float = 60.0
    window: int = 50
    threshold: float = 0.8


@dataclass(frozen=True)
class TrainConfig:
    n_envs: int = 1
    warmup_steps: int = 2000
    log_every: int = 1000  # env steps between metrics rows
    checkpoint_every: int = 50_000
    eval_episodes: int = 100
    eval_every: int = 20_000  # min env steps between target evaluations
    target_success: float = 0.9
    return_window: int = 50


@dataclass(frozen=True)
class AblationConfig:
    no_boxcast: bool = False
    no_raycast: bool = False
    no_abs_position: bool = False
    no_lstm: bool = False
    no_curriculum: bool = False
    her: bool = False

    def active(self) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name)]


@dataclass(frozen=True)
class RunConfig:
    map: str = "toy_desk"
    cell_size: float = 0.5
    seed: int = 0
    budget: int = 2_000_000
    out: str = "runs/default"
    deterministic: bool = False
    sim: SimConfig = field(default_factory=SimConfig)
    obs: ObsConfig = field(default_factory=ObsConfig)
    net: NetworkSpec = field(default_factory=NetworkSpec)
    sac: SacConfig = field(default_factory=SacConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablations: AblationConfig = field(default_factory=AblationConfig)

    def resolved(self) -> "RunConfig":
        """Apply ablation flags to the pathways they control."""
        ab = self.ablations
        obs = replace(
            self.obs,
            use_occupancy=self.obs.use_occupancy and not ab.no_boxcast,
            use_depth=self.obs.use_depth and not ab.no_raycast,
            use_abs_positions=self.obs.use_abs_positions and not ab.no_abs_position,
        )
        net = replace(self.net, occ_shape=obs.occ_dims, depth_shape=obs.depth_rays, lstm_hidden=0 if ab.no_lstm else self.net.lstm_hidden)
        sac = replace(self.sac, her=self.sac.her or ab.her)
        cur = self.curriculum
        if ab.no_curriculum:
            cur = replace(cur, start_radius=cur.radius_max)
        train = self.train
        if self.deterministic and train.n_envs != 1:
            train = replace(train, n_envs=1)
        return replace(self, obs=obs, net=net, sac=sac, curriculum=cur, train=train)

    def with_ablations(self, flags) -> "RunConfig":
        unknown = [f for f in flags if f not in ABLATIONS]
        if unknown:
            raise ConfigError([f"unknown ablation {f!r} (choose from {', '.join(ABLATIONS)})" for f in unknown])
        return replace(self, ablations=replace(self.ablations, **{f: True for f in flags}))


def to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [to_dict(v) for v in obj]
    return obj


def _build(cls, data: dict, path: str, problems: list[str]):
    if not isinstance(data, dict):
        problems.append(f"{path or '<root>'}: expected an object")
        return cls()
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            problems.append(f"{where}: unknown key")
            continue
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, where, problems)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                problems.append(f"{where}: expected a boolean")
            else:
                kwargs[key] = value
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                problems.append(f"{where}: expected a number")
            elif isinstance(default, int) and not float(value).is_integer():
                problems.append(f"{where}: expected an integer")
            else:
                kwargs[key] = type(default)(value)
        elif isinstance(default, tuple):
            if not isinstance(value, list):
                problems.append(f"{where}: expected a list")
            else:
                kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{path or '<root>'}: {exc}")
        return cls()


def from_dict(data: dict) -> RunConfig:
    problems: list[str] = []
    cfg = _build(RunConfig, data, "", problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError([f"{p}: config file not found"])
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{p}:{exc.lineno}: {exc.msg}"]) from None
    return from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
