"""Static box-world geometry: maps, ray and box queries, occupancy baking.

World geometry is a set of axis-aligned solid boxes plus jump-pad trigger
volumes. Up is +y. All lengths are meters.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

Vec3 = tuple[float, float, float]

OCC_MAGIC = b"NAVB"
OCC_VERSION = 1
# magic, version, origin xyz, cell_size, dims xyz
_OCC_HEADER = struct.Struct("<4sI3dd3I")

DEFAULT_MAX_CELLS = 64_000_000
DEFAULT_HALF_EXTENTS: Vec3 = (0.3, 0.9, 0.3)


class MapError(ValueError):
    """Base class for map loading problems."""


class MapParseError(MapError):
    pass


class MapValidationError(MapError):
    pass


class OccupancyCapError(MapError):
    pass


class UnwalkableRegionError(RuntimeError):
    pass


def _vec3(value, where: str) -> Vec3:
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise MapParseError(f"{where}: expected a list of 3 numbers, got {value!r}")
    out = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise MapParseError(f"{where}: expected finite numbers, got {value!r}")
        out.append(float(v))
    return (out[0], out[1], out[2])


@dataclass(frozen=True)
class Box:
    min: Vec3
    max: Vec3

    def __post_init__(self):
        object.__setattr__(self, "min", tuple(float(v) for v in self.min))
        object.__setattr__(self, "max", tuple(float(v) for v in self.max))
        if len(self.min) != 3 or len(self.max) != 3:
            raise MapValidationError("box corners must be 3-vectors")
        for k in range(3):
            if not self.min[k] < self.max[k]:
                raise MapValidationError(f"box min must be < max on every axis, got {self.min} / {self.max}")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.min)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.max)

    def contains_box(self, other: "Box") -> bool:
        return all(self.min[k] <= other.min[k] and other.max[k] <= self.max[k] for k in range(3))

    def intersects(self, other: "Box") -> bool:
        return all(self.min[k] <= other.max[k] and other.min[k] <= self.max[k] for k in range(3))

    def translated(self, offset: Sequence[float]) -> "Box":
        return Box(tuple(a + b for a, b in zip(self.min, offset)), tuple(a + b for a, b in zip(self.max, offset)))

    def to_dict(self) -> dict:
        return {"min": list(self.min), "max": list(self.max)}


def agent_box(position: Sequence[float], half_extents: Sequence[float]) -> Box:
    """Bounding box of an agent whose ``position`` is the center of its feet."""
    x, y, z = position
    hx, hy, hz = half_extents
    return Box((x - hx, y, z - hz), (x + hx, y + 2.0 * hy, z + hz))


@dataclass(frozen=True)
class JumpPad:
    trigger: Box
    launch_speed: float

    def __post_init__(self):
        if not self.launch_speed > 0:
            raise MapValidationError(f"pad launch_speed must be > 0, got {self.launch_speed}")


@dataclass(frozen=True, eq=False)
class MapDef:
    name: str
    bounds: Box
    solids: tuple[Box, ...]
    pads: tuple[JumpPad, ...] = ()
    spawn_region: Box | None = None
    goal_epsilon: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "solids", tuple(self.solids))
        object.__setattr__(self, "pads", tuple(self.pads))
        if self.spawn_region is None:
            object.__setattr__(self, "spawn_region", self.bounds)

    @cached_property
    def solid_lo(self) -> np.ndarray:
        arr = np.array([s.min for s in self.solids], dtype=np.float64).reshape(-1, 3)
        arr.flags.writeable = False
        return arr

    @cached_property
    def solid_hi(self) -> np.ndarray:
        arr = np.array([s.max for s in self.solids], dtype=np.float64).reshape(-1, 3)
        arr.flags.writeable = False
        return arr

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.bounds.lo + self.bounds.hi)

    @property
    def half_extent(self) -> np.ndarray:
        return 0.5 * (self.bounds.hi - self.bounds.lo)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "bounds": self.bounds.to_dict(),
            "solids": [s.to_dict() for s in self.solids],
            "pads": [{"trigger": p.trigger.to_dict(), "launch_speed": p.launch_speed} for p in self.pads],
            "spawn_region": self.spawn_region.to_dict(),
            "goal_epsilon": self.goal_epsilon,
        }

    def translated(self, offset: Sequence[float]) -> "MapDef":
        return MapDef(
            name=self.name,
            bounds=self.bounds.translated(offset),
            solids=tuple(s.translated(offset) for s in self.solids),
            pads=tuple(JumpPad(p.trigger.translated(offset), p.launch_speed) for p in self.pads),
            spawn_region=self.spawn_region.translated(offset),
            goal_epsilon=self.goal_epsilon,
        )


def validate_map(m: MapDef) -> MapDef:
    """Check every MapDef invariant; raise MapValidationError naming the first violation."""
    for i, s in enumerate(m.solids):
        if not m.bounds.contains_box(s):
            raise MapValidationError(f"solid {i} outside bounds")
    for i, p in enumerate(m.pads):
        if not m.bounds.contains_box(p.trigger):
            raise MapValidationError(f"pad {i} outside bounds")
    if not m.goal_epsilon > 0:
        raise MapValidationError(f"goal_epsilon must be > 0, got {m.goal_epsilon}")
    sr = m.spawn_region
    if not m.bounds.intersects(sr):
        raise MapValidationError("spawn_region outside bounds")
    if not any(_top_face_in_region(s, sr) is not None for s in m.solids):
        raise MapValidationError("spawn_region does not intersect any walkable surface")
    return m


def _box_from(d, where: str) -> Box:
    if not isinstance(d, dict):
        raise MapParseError(f"{where}: expected an object with min/max")
    for key in ("min", "max"):
        if key not in d:
            raise MapParseError(f"{where}: missing field '{key}'")
    lo, hi = _vec3(d["min"], f"{where}.min"), _vec3(d["max"], f"{where}.max")
    try:
        return Box(lo, hi)
    except MapValidationError as exc:
        raise MapValidationError(f"{where}: {exc}") from None


def map_from_dict(doc: dict) -> MapDef:
    if not isinstance(doc, dict):
        raise MapParseError("map document must be a JSON object")
    known = {"name", "bounds", "solids", "pads", "spawn_region", "goal_epsilon"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise MapParseError(f"unknown map fields: {', '.join(unknown)}")
    for key in ("name", "bounds", "solids"):
        if key not in doc:
            raise MapParseError(f"missing field '{key}'")
    if not isinstance(doc["name"], str):
        raise MapParseError("name: expected a string")
    bounds = _box_from(doc["bounds"], "bounds")
    if not isinstance(doc["solids"], list):
        raise MapParseError("solids: expected a list")
    solids = tuple(_box_from(s, f"solids[{i}]") for i, s in enumerate(doc["solids"]))
    pads = []
    for i, p in enumerate(doc.get("pads", [])):
        if not isinstance(p, dict) or "trigger" not in p or "launch_speed" not in p:
            raise MapParseError(f"pads[{i}]: expected {{trigger, launch_speed}}")
        speed = p["launch_speed"]
        if isinstance(speed, bool) or not isinstance(speed, (int, float)):
            raise MapParseError(f"pads[{i}].launch_speed: expected a number")
        try:
            pads.append(JumpPad(_box_from(p["trigger"], f"pads[{i}].trigger"), float(speed)))
        except MapValidationError as exc:
            raise MapValidationError(f"pads[{i}]: {exc}") from None
    spawn = _box_from(doc["spawn_region"], "spawn_region") if "spawn_region" in doc else bounds
    eps = doc.get("goal_epsilon", 1.0)
    if isinstance(eps, bool) or not isinstance(eps, (int, float)):
        raise MapParseError("goal_epsilon: expected a number")
    return validate_map(MapDef(doc["name"], bounds, solids, tuple(pads), spawn, float(eps)))


def load_map(path: str | Path) -> MapDef:
    """Read and validate a map JSON document."""
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MapParseError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    return map_from_dict(doc)


def save_map(m: MapDef, path: str | Path) -> None:
    Path(path).write_text(json.dumps(m.to_dict(), indent=2) + "\n")


def builtin_map_path(name: str) -> Path:
    return Path(__file__).parent / "maps" / f"{name}.map.json"


def resolve_map(spec: str | Path) -> MapDef:
    """Load a map by path, or by the name of a shipped fixture (``toy_desk``)."""
    p = Path(spec)
    if not p.exists() and builtin_map_path(str(spec)).exists():
        p = builtin_map_path(str(spec))
    return load_map(p)


# ---------------------------------------------------------------- queries


def _slab_intervals(lo: np.ndarray, hi: np.ndarray, origins: np.ndarray, dirs: np.ndarray):
    """Entry/exit parameters of rays (R,3) against boxes (N,3); returns (R,N) arrays."""
    o = origins[:, None, :]
    d = dirs[:, None, :]
    zero = d == 0.0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv = 1.0 / d
        t1 = (lo[None] - o) * inv
        t2 = (hi[None] - o) * inv
    inside = (o >= lo[None]) & (o <= hi[None])
    tmin = np.where(zero, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(zero, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    return tmin.max(axis=2), tmax.min(axis=2)


def raycast_many(m: MapDef, origins, dirs, max_dist: float) -> np.ndarray:
    """Batched raycast. Returns hit distances, ``inf`` for misses."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if len(m.solids) == 0:
        return np.full(len(origins), np.inf)
    tnear, tfar = _slab_intervals(m.solid_lo, m.solid_hi, origins, dirs)
    hit = (tnear <= tfar) & (tnear > 0.0) & (tnear <= max_dist)
    t = np.where(hit, tnear, np.inf)
    return t.min(axis=1)


def raycast(m: MapDef, origin, direction, max_dist: float) -> float | None:
    """Distance to the first solid entered along the ray, or None on a miss."""
    d = np.asarray(direction, dtype=np.float64)
    if abs(float(np.linalg.norm(d)) - 1.0) > 1e-9:
        raise ValueError("raycast direction must be a unit vector")
    if not max_dist > 0:
        raise ValueError("max_dist must be > 0")
    t = float(raycast_many(m, np.asarray(origin, dtype=np.float64)[None], d[None], max_dist)[0])
    return None if math.isinf(t) else t


def overlap_mask(m: MapDef, query: Box, closed: bool = True) -> np.ndarray:
    if len(m.solids) == 0:
        return np.zeros(0, dtype=bool)
    qlo, qhi = query.lo, query.hi
    if closed:
        return np.all((qlo <= m.solid_hi) & (m.solid_lo <= qhi), axis=1)
    return np.all((qlo < m.solid_hi) & (m.solid_lo < qhi), axis=1)


def box_overlap(m: MapDef, query: Box, closed: bool = True) -> bool:
    """True iff ``query`` intersects any solid.

    With ``closed=True`` (the default) touching faces count as overlap. The
    open variant requires positive-volume intersection and is what the
    no-penetration checks use, since an agent standing on a floor touches it.
    """
    return bool(overlap_mask(m, query, closed).any())


# ---------------------------------------------------------------- occupancy


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    origin: Vec3
    cell_size: float
    dims: tuple[int, int, int]
    occupied: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be > 0")
        occ = np.asarray(self.occupied, dtype=bool)
        if occ.shape != tuple(self.dims):
            raise ValueError(f"occupancy shape {occ.shape} does not match dims {self.dims}")
        occ = occ.copy()
        occ.flags.writeable = False
        object.__setattr__(self, "occupied", occ)

    def cell_of(self, point) -> np.ndarray:
        p = np.asarray(point, dtype=np.float64)
        return np.floor((p - np.asarray(self.origin)) / self.cell_size).astype(np.int64)

    def cell_box(self, i: int, j: int, k: int) -> Box:
        o, cs = self.origin, self.cell_size
        return Box(
            (o[0] + i * cs, o[1] + j * cs, o[2] + k * cs),
            (o[0] + (i + 1) * cs, o[1] + (j + 1) * cs, o[2] + (k + 1) * cs),
        )

    def count(self) -> int:
        return int(self.occupied.sum())

    def equals(self, other: "VoxelGrid") -> bool:
        return (
            tuple(self.origin) == tuple(other.origin)
            and self.cell_size == other.cell_size
            and tuple(self.dims) == tuple(other.dims)
            and bool(np.array_equal(self.occupied, other.occupied))
        )

    def to_bytes(self) -> bytes:
        header = _OCC_HEADER.pack(OCC_MAGIC, OCC_VERSION, *map(float, self.origin), float(self.cell_size), *map(int, self.dims))
        bits = np.packbits(self.occupied.ravel(order="C"), bitorder="little")
        return header + bits.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "VoxelGrid":
        if len(data) < _OCC_HEADER.size:
            raise ValueError("occupancy cache truncated")
        magic, version, ox, oy, oz, cs, nx, ny, nz = _OCC_HEADER.unpack_from(data)
        if magic != OCC_MAGIC:
            raise ValueError(f"bad occupancy cache magic {magic!r}")
        if version != OCC_VERSION:
            raise ValueError(f"unsupported occupancy cache version {version}")
        n = nx * ny * nz
        bits = np.frombuffer(data, dtype=np.uint8, offset=_OCC_HEADER.size)
        if bits.size != (n + 7) // 8:
            raise ValueError("occupancy cache payload length does not match dims")
        occ = np.unpackbits(bits, count=n, bitorder="little").astype(bool).reshape((nx, ny, nz))
        return cls((ox, oy, oz), cs, (nx, ny, nz), occ)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "VoxelGrid":
        return cls.from_bytes(Path(path).read_bytes())


def grid_dims(bounds: Box, cell_size: float) -> tuple[int, int, int]:
    ext = bounds.hi - bounds.lo
    return tuple(int(math.ceil(e / cell_size - 1e-9)) for e in ext)


def bake_occupancy(m: MapDef, cell_size: float, max_cells: int = DEFAULT_MAX_CELLS) -> VoxelGrid:
    """Voxelize the map over its bounds.

    A cell is set iff its AABB has positive-volume intersection with a
    solid; cells merely touching a face stay clear so a floor whose top sits
    on a cell boundary does not spill into the free cell above it.
    """
    if not cell_size > 0:
        raise ValueError("cell_size must be > 0")
    dims = grid_dims(m.bounds, cell_size)
    n = dims[0] * dims[1] * dims[2]
    if n > max_cells:
        raise OccupancyCapError(f"grid needs {n} cells, cap allows {max_cells}")
    origin = m.bounds.min
    occ = np.zeros(dims, dtype=bool)
    axes_lo = [origin[a] + np.arange(dims[a]) * cell_size for a in range(3)]
    axes_hi = [origin[a] + (np.arange(dims[a]) + 1) * cell_size for a in range(3)]
    for s in m.solids:
        masks = [(axes_lo[a] < s.max[a]) & (axes_hi[a] > s.min[a]) for a in range(3)]
        occ |= masks[0][:, None, None] & masks[1][None, :, None] & masks[2][None, None, :]
    return VoxelGrid(origin, float(cell_size), dims, occ)


# ---------------------------------------------------------------- spawning


def _top_face_in_region(s: Box, region: Box):
    top = s.max[1]
    if not (region.min[1] <= top <= region.max[1]):
        return None
    x0, x1 = max(s.min[0], region.min[0]), min(s.max[0], region.max[0])
    z0, z1 = max(s.min[2], region.min[2]), min(s.max[2], region.max[2])
    if x1 <= x0 or z1 <= z0:
        return None
    return (x0, x1, top, z0, z1)


def sample_walkable_point(
    m: MapDef,
    region: Box,
    rng: np.random.Generator,
    half_extents: Sequence[float] = DEFAULT_HALF_EXTENTS,
    cylinder: tuple[Sequence[float], float] | None = None,
    max_tries: int = 1000,
) -> np.ndarray:
    """Uniform point on a solid's top face inside ``region`` with agent clearance.

    ``cylinder`` optionally restricts the horizontal distance to a vertical
    axis through ``center``. Raises UnwalkableRegionError after ``max_tries``
    rejections, or at once when no top face intersects the region.
    """
    if cylinder is not None:
        center, radius = cylinder
        cx, cz = float(center[0]), float(center[2])
        lo = (max(region.min[0], cx - radius), region.min[1], max(region.min[2], cz - radius))
        hi = (min(region.max[0], cx + radius), region.max[1], min(region.max[2], cz + radius))
        if lo[0] >= hi[0] or lo[2] >= hi[2]:
            raise UnwalkableRegionError("cylinder does not intersect the region")
        region = Box((lo[0], lo[1], lo[2]), (hi[0], max(hi[1], lo[1] + 1e-9), hi[2]))
    faces = [f for f in (_top_face_in_region(s, region) for s in m.solids) if f is not None]
    if not faces:
        raise UnwalkableRegionError("no walkable surface in region")
    areas = np.array([(f[1] - f[0]) * (f[4] - f[3]) for f in faces])
    probs = areas / areas.sum()
    for _ in range(max_tries):
        x0, x1, y, z0, z1 = faces[int(rng.choice(len(faces), p=probs))]
        x = x0 + (x1 - x0) * rng.random()
        z = z0 + (z1 - z0) * rng.random()
        if cylinder is not None and (x - cx) ** 2 + (z - cz) ** 2 > radius * radius:
            continue
        body = agent_box((x, y, z), half_extents)
        if not m.bounds.contains_box(body) or box_overlap(m, body, closed=False):
            continue
        return np.array([x, y, z])
    raise UnwalkableRegionError(f"no walkable point after {max_tries} rejections")
