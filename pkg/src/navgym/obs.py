"""Network inputs: cropped occupancy window, ray-fan depth map, scalar features."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .world import MapDef, VoxelGrid, raycast_many

if TYPE_CHECKING:
    from .sim import AgentState, EpisodeState

N_SCALARS = 13  # velocity(3) accel(3) relative_goal(3) prev_action(4)
N_ABS = 6


@dataclass(frozen=True)
class ObsConfig:
    occ_dims: tuple[int, int, int] = (16, 8, 16)
    occ_cell: float = 0.5
    depth_rays: tuple[int, int] = (12, 4)
    hfov: float = 2.0 * math.pi / 3.0
    vfov: float = math.pi / 3.0
    max_range: float = 30.0
    eye_height: float = 1.5
    vel_scale: float = 10.0
    accel_scale: float = 50.0
    use_occupancy: bool = True
    use_depth: bool = True
    use_abs_positions: bool = True

    def __post_init__(self):
        object.__setattr__(self, "occ_dims", tuple(int(v) for v in self.occ_dims))
        object.__setattr__(self, "depth_rays", tuple(int(v) for v in self.depth_rays))
        if min(self.occ_dims) < 1 or min(self.depth_rays) < 1:
            raise ValueError("observation counts must be >= 1")
        for name in ("hfov", "vfov"):
            v = getattr(self, name)
            if not 0 < v <= 2 * math.pi:
                raise ValueError(f"ObsConfig.{name} must be in (0, 2*pi]")
        if not self.max_range > 0 or not self.occ_cell > 0:
            raise ValueError("ObsConfig.max_range and occ_cell must be > 0")


@dataclass(eq=False)
class Observation:
    occupancy: np.ndarray  # uint8 {0,1}, occ_dims
    depth: np.ndarray  # float32 in [0,1], depth_rays
    scalars: np.ndarray  # float32, N_SCALARS
    abs_positions: np.ndarray  # float32, N_ABS

    def to_bytes(self) -> bytes:
        """Flat little-endian f32 record: occupancy, depth, scalars, abs_positions."""
        parts = [self.occupancy.ravel(), self.depth.ravel(), self.scalars.ravel(), self.abs_positions.ravel()]
        return np.concatenate([p.astype("<f4") for p in parts]).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, cfg: ObsConfig) -> "Observation":
        flat = np.frombuffer(data, dtype="<f4")
        n_occ = int(np.prod(cfg.occ_dims))
        n_dep = int(np.prod(cfg.depth_rays))
        expected = n_occ + n_dep + N_SCALARS + N_ABS
        if flat.size != expected:
            raise ValueError(f"observation record has {flat.size} floats, expected {expected}")
        i = 0
        occ = flat[i:i + n_occ].reshape(cfg.occ_dims).astype(np.uint8); i += n_occ
        dep = flat[i:i + n_dep].reshape(cfg.depth_rays).astype(np.float32); i += n_dep
        sc = flat[i:i + N_SCALARS].astype(np.float32); i += N_SCALARS
        ab = flat[i:i + N_ABS].astype(np.float32)
        return cls(occ, dep, sc, ab)


def crop_occupancy(grid: VoxelGrid, center: Sequence[float], cfg: ObsConfig) -> np.ndarray:
    """World-aligned window of cached occupancy around the cell holding ``center``.

    Cells outside the baked grid read as occupied.
    """
    if abs(grid.cell_size - cfg.occ_cell) > 1e-12:
        raise ValueError(f"grid baked at {grid.cell_size} m, observation expects {cfg.occ_cell} m")
    dims = np.asarray(cfg.occ_dims)
    c = grid.cell_of(center)
    lo = c - dims // 2
    hi = lo + dims
    out = np.ones(cfg.occ_dims, dtype=np.uint8)
    g = np.asarray(grid.dims)
    src_lo = np.maximum(lo, 0)
    src_hi = np.minimum(hi, g)
    if np.all(src_hi > src_lo):
        dst_lo = src_lo - lo
        dst_hi = dst_lo + (src_hi - src_lo)
        out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = grid.occupied[
            src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]
        ]
    return out


def ray_directions(yaw: float, cfg: ObsConfig) -> np.ndarray:
    """Unit directions for the (Dh, Dv) ray fan, shape (Dh*Dv, 3), row-major over (h, v)."""
    dh, dv = cfg.depth_rays
    h = yaw + ((np.arange(dh) + 0.5) / dh - 0.5) * cfg.hfov
    p = ((np.arange(dv) + 0.5) / dv - 0.5) * cfg.vfov
    hh, pp = np.meshgrid(h, p, indexing="ij")
    d = np.stack([np.cos(pp) * np.sin(hh), np.sin(pp), np.cos(pp) * np.cos(hh)], axis=-1)
    return d.reshape(-1, 3)


def cast_depth_rays(m: MapDef, agent: "AgentState", cfg: ObsConfig) -> np.ndarray:
    eye = np.asarray(agent.position, dtype=np.float64) + np.array([0.0, cfg.eye_height, 0.0])
    dirs = ray_directions(agent.yaw, cfg)
    t = raycast_many(m, np.broadcast_to(eye, dirs.shape), dirs, cfg.max_range)
    depth = np.where(np.isinf(t), 1.0, t / cfg.max_range)
    return np.clip(depth, 0.0, 1.0).reshape(cfg.depth_rays).astype(np.float32)


def to_yaw_frame(v, yaw: float) -> np.ndarray:
    """World vector -> (right, up, forward) components for an agent facing ``yaw``."""
    v = np.asarray(v, dtype=np.float64)
    s, c = math.sin(yaw), math.cos(yaw)
    return np.array([c * v[0] - s * v[2], v[1], s * v[0] + c * v[2]])


def build_observation(agent: "AgentState", ep: "EpisodeState", grid: VoxelGrid, m: MapDef, cfg: ObsConfig) -> Observation:
    if cfg.use_occupancy:
        occ = crop_occupancy(grid, agent.position, cfg)
    else:
        occ = np.zeros(cfg.occ_dims, dtype=np.uint8)
    if cfg.use_depth:
        depth = cast_depth_rays(m, agent, cfg)
    else:
        depth = np.zeros(cfg.depth_rays, dtype=np.float32)
    scalars = np.concatenate([
        to_yaw_frame(agent.velocity, agent.yaw) / cfg.vel_scale,
        to_yaw_frame(agent.accel, agent.yaw) / cfg.accel_scale,
        relative_goal_features(agent.position, agent.yaw, ep.goal, m),
        agent.prev_action.as_array(),
    ]).astype(np.float32)
    if cfg.use_abs_positions:
        absp = abs_position_features(agent.position, ep.goal, m)
    else:
        absp = np.zeros(N_ABS, dtype=np.float32)
    return Observation(occ, depth, scalars, absp)


def relative_goal_features(position, yaw: float, goal, m: MapDef) -> np.ndarray:
    """The relative-goal slice of ``scalars`` (indices 6:9) for a given goal."""
    half = m.half_extent
    horiz_scale = max(half[0], half[2])
    rel = to_yaw_frame(np.asarray(goal) - np.asarray(position), yaw)
    return (rel / np.array([horiz_scale, half[1], horiz_scale])).astype(np.float32)


def abs_position_features(position, goal, m: MapDef) -> np.ndarray:
    half, center = m.half_extent, m.center
    return np.concatenate([(np.asarray(position) - center) / half, (np.asarray(goal) - center) / half]).astype(np.float32)


def stack(observations: Sequence[Observation]) -> dict[str, np.ndarray]:
    return {
        "occupancy": np.stack([o.occupancy for o in observations]),
        "depth": np.stack([o.depth for o in observations]),
        "scalars": np.stack([o.scalars for o in observations]),
        "abs_positions": np.stack([o.abs_positions for o in observations]),
    }
