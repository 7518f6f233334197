"""Agent kinematics, the shaped navigation reward, episodes and the spawn curriculum."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .world import (
    DEFAULT_HALF_EXTENTS,
    Box,
    MapDef,
    UnwalkableRegionError,
    VoxelGrid,
    agent_box,
    overlap_mask,
    sample_walkable_point,
)

if TYPE_CHECKING:
    from .obs import ObsConfig, Observation

SKIN = 1e-6  # horizontal / ceiling clearance left after a blocked move
SUPPORT_PROBE = 1e-6


@dataclass(frozen=True)
class Action:
    jump: float = 0.0
    forward: float = 0.0
    strafe: float = 0.0
    rotate: float = 0.0

    def clamped(self) -> "Action":
        c = lambda v: float(min(1.0, max(-1.0, v)))
        return Action(c(self.jump), c(self.forward), c(self.strafe), c(self.rotate))

    def as_array(self) -> np.ndarray:
        return np.array([self.jump, self.forward, self.strafe, self.rotate], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Action":
        a = np.asarray(a, dtype=np.float64).reshape(4)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3])).clamped()


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    move_speed: float = 6.0
    strafe_speed: float = 4.0
    turn_rate: float = math.pi
    jump_speed: float = 8.0
    gravity: float = 20.0
    step_penalty: float = -0.01
    goal_epsilon: float = 1.0
    half_extents: tuple[float, float, float] = DEFAULT_HALF_EXTENTS
    max_jumps: int = 2
    pads_enabled: bool = True
    budget_factor: float = 4.0
    budget_slack: int = 50

    def __post_init__(self):
        for name in ("dt", "move_speed", "strafe_speed", "jump_speed", "gravity", "goal_epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SimConfig.{name} must be > 0")
        if self.step_penalty > 0:
            raise ValueError("SimConfig.step_penalty must be <= 0")
        if not 0 <= self.max_jumps <= 2:
            raise ValueError("SimConfig.max_jumps must be in {0, 1, 2}")
        object.__setattr__(self, "half_extents", tuple(float(v) for v in self.half_extents))


@dataclass(frozen=True, eq=False)
class AgentState:
    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0
    grounded: bool = True
    jumps_used: int = 0
    prev_action: Action = Action()
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def forward(self) -> np.ndarray:
        return np.array([math.sin(self.yaw), 0.0, math.cos(self.yaw)])

    @property
    def right(self) -> np.ndarray:
        return np.array([math.cos(self.yaw), 0.0, -math.sin(self.yaw)])


@dataclass(frozen=True, eq=False)
class EpisodeState:
    goal: np.ndarray
    best_dist: float
    d0: float
    step: int = 0
    max_steps: int = 100
    done: str = "running"  # running | success | timeout


@dataclass(frozen=True)
class CurriculumState:
    radius: float
    radius_step: float
    radius_max: float
    window_size: int = 50
    threshold: float = 0.8
    window: tuple[bool, ...] = ()

    def __post_init__(self):
        if not 0 < self.radius <= self.radius_max:
            raise ValueError(f"curriculum radius must be in (0, radius_max], got {self.radius}")
        if not 0 < self.threshold < 1:
            raise ValueError("curriculum threshold must be in (0, 1)")

    @property
    def success_rate(self) -> float:
        return sum(self.window) / len(self.window) if self.window else 0.0


def update_curriculum(cur: CurriculumState, success: bool) -> CurriculumState:
    """Record one episode outcome; grow the radius when the full window beats the threshold."""
    window = (cur.window + (bool(success),))[-cur.window_size:]
    if len(window) == cur.window_size and sum(window) / cur.window_size > cur.threshold:
        return replace(cur, radius=min(cur.radius + cur.radius_step, cur.radius_max), window=())
    return replace(cur, window=window)


def compute_reward(d_t: float, best_prev: float, step_penalty: float, goal_epsilon: float) -> float:
    """max(best_prev - d_t, 0) + step_penalty + [d_t <= goal_epsilon]."""
    return max(best_prev - d_t, 0.0) + step_penalty + (1.0 if d_t <= goal_epsilon else 0.0)


def episode_budget(radius: float, cfg: SimConfig) -> int:
    return int(math.ceil(cfg.budget_factor * radius / (cfg.move_speed * cfg.dt))) + cfg.budget_slack


# ---------------------------------------------------------------- kinematics


def _supported(m: MapDef, pos: np.ndarray, half: Sequence[float]) -> bool:
    if pos[1] <= m.bounds.min[1] + 1e-12:
        return True
    if len(m.solids) == 0:
        return False
    probe = Box(
        (pos[0] - half[0], pos[1] - SUPPORT_PROBE, pos[2] - half[2]),
        (pos[0] + half[0], pos[1], pos[2] + half[2]),
    )
    return bool(overlap_mask(m, probe, closed=False).any())


def _move_axis(m: MapDef, pos: np.ndarray, delta: float, axis: int, half: Sequence[float]):
    """Sweep the agent box along one axis; returns (new coordinate, blocked)."""
    lo_off = np.array([-half[0], 0.0, -half[2]])
    hi_off = np.array([half[0], 2.0 * half[1], half[2]])
    start = pos[axis]
    target = start + delta
    lo = pos + lo_off
    hi = pos + hi_off
    if delta > 0:
        hi[axis] = target + hi_off[axis]
    else:
        lo[axis] = target + lo_off[axis]
    blocked = False
    if len(m.solids):
        mask = np.all((lo < m.solid_hi) & (m.solid_lo < hi), axis=1)
        if mask.any():
            blocked = True
            if delta > 0:
                face = m.solid_lo[mask, axis].min()
                target = face - hi_off[axis] - SKIN
            else:
                face = m.solid_hi[mask, axis].max()
                target = face - lo_off[axis] + (SKIN if axis != 1 else 0.0)
    bmin, bmax = m.bounds.min[axis], m.bounds.max[axis]
    if target + hi_off[axis] > bmax:
        target, blocked = bmax - hi_off[axis] - SKIN, True
    if target + lo_off[axis] < bmin:
        target, blocked = bmin - lo_off[axis] + (SKIN if axis != 1 else 0.0), True
    # a blocked move never goes backwards past the start
    if delta > 0:
        target = max(start, target) if blocked else target
    else:
        target = min(start, target) if blocked else target
    return target, blocked


def apply_kinematics(agent: AgentState, a: Action, cfg: SimConfig, m: MapDef) -> AgentState:
    """Advance the agent one tick: turn, move, gravity, jumps, move-and-slide, pads."""
    a = a.clamped()
    half = cfg.half_extents
    yaw = agent.yaw + a.rotate * cfg.turn_rate * cfg.dt
    fwd = np.array([math.sin(yaw), 0.0, math.cos(yaw)])
    right = np.array([math.cos(yaw), 0.0, -math.sin(yaw)])
    horiz = fwd * (a.forward * cfg.move_speed) + right * (a.strafe * cfg.strafe_speed)

    pos = np.array(agent.position, dtype=np.float64)
    grounded = agent.grounded
    jumps = agent.jumps_used
    vy = float(agent.velocity[1])
    if grounded and not _supported(m, pos, half):
        grounded = False
    if not grounded:
        vy -= cfg.gravity * cfg.dt
    if a.jump > 0.0 and jumps < cfg.max_jumps:
        vy = cfg.jump_speed
        jumps += 1
        grounded = False
    vel = np.array([horiz[0], vy, horiz[2]])

    landed = False
    for axis in (0, 2, 1):
        delta = vel[axis] * cfg.dt
        if delta == 0.0:
            continue
        pos[axis], blocked = _move_axis(m, pos, delta, axis, half)
        if blocked:
            if axis == 1 and delta < 0:
                landed = True
            vel[axis] = 0.0
    if landed:
        grounded, jumps = True, 0
        vel[1] = 0.0
    elif not grounded and vel[1] == 0.0 and _supported(m, pos, half):
        grounded, jumps = True, 0

    if cfg.pads_enabled and m.pads:
        body = agent_box(pos, half)
        for pad in m.pads:
            if body.intersects(pad.trigger):
                vel[1] = pad.launch_speed
                jumps = 1
                grounded = False
                break

    accel = (vel - np.asarray(agent.velocity)) / cfg.dt
    return AgentState(pos, vel, yaw, grounded, jumps, a, accel)


# ---------------------------------------------------------------- episodes


def reset(
    m: MapDef,
    curriculum: CurriculumState,
    rng: np.random.Generator,
    cfg: SimConfig = SimConfig(),
    grid: VoxelGrid | None = None,
    obs_cfg: "ObsConfig | None" = None,
    max_retries: int = 50,
):
    """Spawn an agent and a goal inside the curriculum cylinder around it.

    Returns ``(agent, episode, observation)``; the observation is None unless
    ``grid`` and ``obs_cfg`` are given.
    """
    if curriculum.radius > curriculum.radius_max:
        raise ValueError("curriculum radius exceeds radius_max")
    last = None
    for _ in range(max_retries):
        start = sample_walkable_point(m, m.spawn_region, rng, cfg.half_extents)
        try:
            goal = sample_walkable_point(m, m.bounds, rng, cfg.half_extents, cylinder=(start, curriculum.radius))
        except UnwalkableRegionError as exc:
            last = exc
            continue
        yaw = float(rng.uniform(-math.pi, math.pi))
        agent = AgentState(start, np.zeros(3), yaw, True, 0, Action(), np.zeros(3))
        d0 = float(np.linalg.norm(goal - start))
        ep = EpisodeState(goal, d0, d0, 0, episode_budget(curriculum.radius, cfg), "running")
        obs = None
        if grid is not None and obs_cfg is not None:
            from .obs import build_observation

            obs = build_observation(agent, ep, grid, m, obs_cfg)
        return agent, ep, obs
    raise UnwalkableRegionError(f"could not place a goal after {max_retries} spawn retries: {last}")


def step(agent: AgentState, ep: EpisodeState, a: Action, cfg: SimConfig, m: MapDef):
    """One environment step. Returns ``(agent, episode, reward, done)``."""
    if ep.done != "running":
        raise RuntimeError("step() called on a finished episode")
    agent = apply_kinematics(agent, a, cfg, m)
    d_t = float(np.linalg.norm(ep.goal - agent.position))
    reward = compute_reward(d_t, ep.best_dist, cfg.step_penalty, cfg.goal_epsilon)
    n = ep.step + 1
    status = "running"
    if d_t <= cfg.goal_epsilon:
        status = "success"
    elif n >= ep.max_steps:
        status = "timeout"
    ep = replace(ep, best_dist=min(ep.best_dist, d_t), step=n, done=status)
    return agent, ep, reward, status != "running"


class NavEnv:
    """Stateful wrapper pairing the simulator with observation assembly."""

    def __init__(self, m: MapDef, grid: VoxelGrid, sim_cfg: SimConfig, obs_cfg: "ObsConfig", seed: int):
        self.map = m
        self.grid = grid
        self.sim_cfg = sim_cfg
        self.obs_cfg = obs_cfg
        self.rng = np.random.default_rng(seed)
        self.agent: AgentState | None = None
        self.episode: EpisodeState | None = None
        self.ep_return = 0.0

    def reset(self, curriculum: CurriculumState) -> "Observation":
        self.agent, self.episode, obs = reset(self.map, curriculum, self.rng, self.sim_cfg, self.grid, self.obs_cfg)
        self.ep_return = 0.0
        return obs

    def step(self, action: Action):
        from .obs import build_observation

        self.agent, self.episode, r, done = step(self.agent, self.episode, action, self.sim_cfg, self.map)
        self.ep_return += r
        obs = build_observation(self.agent, self.episode, self.grid, self.map, self.obs_cfg)
        return obs, r, done


# ---------------------------------------------------------------- dumps


class TrajectoryWriter:
    """JSONL per-step trajectory dump."""

    def __init__(self, path: str | Path):
        self._fh = open(path, "w")

    def write(self, t: int, agent: AgentState, action: Action, reward: float, d_t: float, done: str) -> None:
        row = {
            "t": t,
            "pos": [float(v) for v in agent.position],
            "vel": [float(v) for v in agent.velocity],
            "yaw": float(agent.yaw),
            "action": [action.jump, action.forward, action.strafe, action.rotate],
            "reward": float(reward),
            "D_t": float(d_t),
            "done": done,
        }
        self._fh.write(json.dumps(row) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


EPISODE_CSV_HEADER = ["episode", "radius", "steps", "success", "return"]


def write_episode_csv(path: str | Path, rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPISODE_CSV_HEADER)
        for r in rows:
            w.writerow(r)
