"""NavMesh baseline: walkable rectangles from the voxel grid, jump links certified by simulation,
A* over the region graph, line-of-sight smoothing and a waypoint-following controller."""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .sim import Action, AgentState, SimConfig, apply_kinematics
from .world import DEFAULT_HALF_EXTENTS, MapDef, VoxelGrid, agent_box, box_overlap, overlap_mask

ABILITIES = ("jump", "double_jump", "pad")
NAVGRAPH_VERSION = 1
STEP_HEIGHT = 0.5
HEADINGS = 8
Y_TOLERANCE = 0.5  # how far above a surface a point may be and still resolve to it


class OffMeshError(ValueError):
    def __init__(self, which: str, point):
        super().__init__(f"{which} point {tuple(round(float(v), 4) for v in point)} is not on the navmesh")
        self.which = which


class HeuristicError(AssertionError):
    pass


@dataclass(frozen=True)
class NavPolygon:
    id: int
    y: float
    layer: int
    cells: tuple[int, int, int, int]  # i0, k0, i1, k1 inclusive
    min: tuple[float, float]  # (x, z)
    max: tuple[float, float]

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.min[0] + self.max[0]) / 2, self.y, (self.min[1] + self.max[1]) / 2])

    @property
    def area(self) -> float:
        return (self.max[0] - self.min[0]) * (self.max[1] - self.min[1])

    def contains_xz(self, x: float, z: float, tol: float = 1e-9) -> bool:
        return self.min[0] - tol <= x <= self.max[0] + tol and self.min[1] - tol <= z <= self.max[1] + tol

    def cell_iter(self):
        i0, k0, i1, k1 = self.cells
        for i in range(i0, i1 + 1):
            for k in range(k0, k1 + 1):
                yield i, self.layer, k


@dataclass(frozen=True)
class NavEdge:
    src: int
    dst: int
    kind: str  # adjacency | link
    cost: float
    ability: str | None = None
    takeoff: tuple[float, float, float] | None = None
    landing: tuple[float, float, float] | None = None
    heading: float | None = None  # None for manual links
    via: tuple[float, float, float] | None = None  # shared-boundary midpoint of an adjacency

    def to_dict(self) -> dict:
        d = {"src": self.src, "dst": self.dst, "kind": self.kind, "cost": self.cost}
        for k in ("ability", "takeoff", "landing", "heading", "via"):
            v = getattr(self, k)
            if v is not None:
                d[k] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NavEdge":
        tup = lambda v: None if v is None else tuple(float(x) for x in v)
        return cls(int(d["src"]), int(d["dst"]), d["kind"], float(d["cost"]), d.get("ability"),
                   tup(d.get("takeoff")), tup(d.get("landing")), d.get("heading"), tup(d.get("via")))


@dataclass(frozen=True, eq=False)
class NavGraph:
    polygons: tuple[NavPolygon, ...]
    edges: tuple[NavEdge, ...]
    origin: tuple[float, float, float]
    cell_size: float
    dims: tuple[int, int, int]
    step_height: float = STEP_HEIGHT

    def __post_init__(self):
        n = len(self.polygons)
        for e in self.edges:
            if not (0 <= e.src < n and 0 <= e.dst < n):
                raise ValueError(f"edge {e.src}->{e.dst} references a missing polygon")
        columns: dict[tuple[int, int], list[int]] = {}
        for p in self.polygons:
            i0, k0, i1, k1 = p.cells
            for i in range(i0, i1 + 1):
                for k in range(k0, k1 + 1):
                    columns.setdefault((i, k), []).append(p.id)
        out: list[list[NavEdge]] = [[] for _ in range(n)]
        for e in self.edges:
            out[e.src].append(e)
        depth = max((len(v) for v in columns.values()), default=1)
        surf = np.full((self.dims[0], self.dims[2], depth), np.nan)
        for (i, k), ids in columns.items():
            surf[i, k, :len(ids)] = [self.polygons[p].y for p in ids]
        object.__setattr__(self, "_columns", columns)
        object.__setattr__(self, "_out", out)
        object.__setattr__(self, "_surfaces", surf)

    def out_edges(self, pid: int) -> list[NavEdge]:
        return self._out[pid]

    @property
    def links(self) -> list[NavEdge]:
        return [e for e in self.edges if e.kind == "link"]

    def _column(self, x: float, z: float):
        i = int(math.floor((x - self.origin[0]) / self.cell_size))
        k = int(math.floor((z - self.origin[2]) / self.cell_size))
        # points on the far edge of the grid belong to the last cell
        if i == self.dims[0] and abs(x - (self.origin[0] + self.dims[0] * self.cell_size)) < 1e-9:
            i -= 1
        if k == self.dims[2] and abs(z - (self.origin[2] + self.dims[2] * self.cell_size)) < 1e-9:
            k -= 1
        return self._columns.get((i, k), ())

    def lookup(self, point, y_tol: float = Y_TOLERANCE) -> int | None:
        """Polygon whose surface lies at or just below ``point``."""
        x, y, z = (float(v) for v in point)
        best, best_dy = None, math.inf
        for pid in self._column(x, z):
            dy = y - self.polygons[pid].y
            if -1e-6 <= dy <= y_tol and dy < best_dy:
                best, best_dy = pid, dy
        return best

    def surface_near(self, point, tol: float) -> bool:
        x, y, z = (float(v) for v in point)
        return any(abs(self.polygons[pid].y - y) <= tol for pid in self._column(x, z))

    def surfaces_near(self, points: np.ndarray, tol: float) -> np.ndarray:
        """Vectorized ``surface_near`` over an (N, 3) array."""
        p = np.asarray(points, dtype=float)
        i = np.floor((p[:, 0] - self.origin[0]) / self.cell_size).astype(int)
        k = np.floor((p[:, 2] - self.origin[2]) / self.cell_size).astype(int)
        i = np.where((i == self.dims[0]) & np.isclose(p[:, 0], self.origin[0] + self.dims[0] * self.cell_size), i - 1, i)
        k = np.where((k == self.dims[2]) & np.isclose(p[:, 2], self.origin[2] + self.dims[2] * self.cell_size), k - 1, k)
        inside = (i >= 0) & (i < self.dims[0]) & (k >= 0) & (k < self.dims[2])
        out = np.zeros(len(p), dtype=bool)
        if inside.any():
            s = self._surfaces[i[inside], k[inside]]
            with np.errstate(invalid="ignore"):
                out[inside] = (np.abs(s - p[inside, 1:2]) <= tol).any(axis=1)
        return out

    def has_adjacency(self, a: int, b: int) -> bool:
        return any(e.dst == b and e.kind == "adjacency" for e in self._out[a])

    def walkable_cells(self) -> set[tuple[int, int, int]]:
        return {c for p in self.polygons for c in p.cell_iter()}

    def with_edges(self, extra: Sequence[NavEdge]) -> "NavGraph":
        return replace(self, edges=self.edges + tuple(extra))

    def to_dict(self) -> dict:
        return {
            "version": NAVGRAPH_VERSION,
            "origin": list(self.origin),
            "cell_size": self.cell_size,
            "dims": list(self.dims),
            "step_height": self.step_height,
            "polygons": [
                {"id": p.id, "y": p.y, "layer": p.layer, "cells": list(p.cells), "min": list(p.min), "max": list(p.max)}
                for p in self.polygons
            ],
            "edges": [e.to_dict() for e in self.edges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NavGraph":
        if d.get("version") != NAVGRAPH_VERSION:
            raise ValueError(f"unsupported navgraph version {d.get('version')!r}")
        polys = tuple(
            NavPolygon(int(p["id"]), float(p["y"]), int(p["layer"]), tuple(int(v) for v in p["cells"]),
                       tuple(float(v) for v in p["min"]), tuple(float(v) for v in p["max"]))
            for p in d["polygons"]
        )
        return cls(polys, tuple(NavEdge.from_dict(e) for e in d["edges"]), tuple(d["origin"]),
                   float(d["cell_size"]), tuple(d["dims"]), float(d.get("step_height", STEP_HEIGHT)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "NavGraph":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- generation


def walkable_mask(grid: VoxelGrid, half_extents: Sequence[float] = DEFAULT_HALF_EXTENTS) -> np.ndarray:
    """Free cells resting on an occupied cell with agent-height clearance.

    The bottom face of the bounds is not a surface: floors are solids.
    """
    occ = grid.occupied
    nx, ny, nz = occ.shape
    h = int(math.ceil(2.0 * half_extents[1] / grid.cell_size - 1e-9))
    support = np.zeros_like(occ)
    support[:, 1:, :] = occ[:, :-1, :]
    clear = np.zeros_like(occ)
    free = ~occ
    for j in range(ny - h + 1):
        clear[:, j, :] = free[:, j:j + h, :].all(axis=1)
    return clear & support


def _greedy_rectangles(layer: np.ndarray) -> list[tuple[int, int, int, int]]:
    """Row-major greedy merge: grow along k, then along i while whole rows stay free."""
    nx, nz = layer.shape
    used = np.zeros_like(layer)
    rects = []
    for i in range(nx):
        row = layer[i]
        k = 0
        while k < nz:
            if not row[k] or used[i, k]:
                k += 1
                continue
            k1 = k
            while k1 + 1 < nz and row[k1 + 1] and not used[i, k1 + 1]:
                k1 += 1
            i1 = i
            while i1 + 1 < nx and layer[i1 + 1, k:k1 + 1].all() and not used[i1 + 1, k:k1 + 1].any():
                i1 += 1
            used[i:i1 + 1, k:k1 + 1] = True
            rects.append((i, k, i1, k1))
            k = k1 + 1
    return rects


def _shared_boundary(a: NavPolygon, b: NavPolygon):
    """Midpoint (x, z) of the boundary segment two rectangles share, or None."""
    ai0, ak0, ai1, ak1 = a.cells
    bi0, bk0, bi1, bk1 = b.cells
    if ai1 + 1 == bi0 or bi1 + 1 == ai0:
        lo, hi = max(ak0, bk0), min(ak1, bk1)
        if lo <= hi:
            x = a.max[0] if ai1 + 1 == bi0 else a.min[0]
            z = (max(a.min[1], b.min[1]) + min(a.max[1], b.max[1])) / 2
            return x, z
    if ak1 + 1 == bk0 or bk1 + 1 == ak0:
        lo, hi = max(ai0, bi0), min(ai1, bi1)
        if lo <= hi:
            z = a.max[1] if ak1 + 1 == bk0 else a.min[1]
            x = (max(a.min[0], b.min[0]) + min(a.max[0], b.max[0])) / 2
            return x, z
    return None


def generate_navmesh(
    m: MapDef,
    grid: VoxelGrid,
    half_extents: Sequence[float] = DEFAULT_HALF_EXTENTS,
    step_height: float = STEP_HEIGHT,
) -> NavGraph:
    walk = walkable_mask(grid, half_extents)
    cs = grid.cell_size
    ox, oy, oz = grid.origin
    polys: list[NavPolygon] = []
    for j in range(walk.shape[1]):
        if not walk[:, j, :].any():
            continue
        for i0, k0, i1, k1 in _greedy_rectangles(walk[:, j, :]):
            polys.append(NavPolygon(
                len(polys), oy + j * cs, j, (i0, k0, i1, k1),
                (ox + i0 * cs, oz + k0 * cs), (ox + (i1 + 1) * cs, oz + (k1 + 1) * cs),
            ))
    edges = []
    for a in polys:
        for b in polys:
            if b.id <= a.id or abs(a.y - b.y) > step_height + 1e-9:
                continue
            mid = _shared_boundary(a, b)
            if mid is None:
                continue
            via = np.array([mid[0], max(a.y, b.y), mid[1]])
            cost = float(np.linalg.norm(a.center - via) + np.linalg.norm(via - b.center))
            v = tuple(float(c) for c in via)
            edges.append(NavEdge(a.id, b.id, "adjacency", cost, via=v))
            edges.append(NavEdge(b.id, a.id, "adjacency", cost, via=v))
    return NavGraph(tuple(polys), tuple(edges), tuple(grid.origin), cs, tuple(grid.dims), step_height)


# ---------------------------------------------------------------- links


def link_cost(graph: NavGraph, src: int, dst: int, takeoff, landing) -> float:
    """Center -> takeoff -> landing -> center; never below the straight center distance."""
    t, l = np.asarray(takeoff, float), np.asarray(landing, float)
    return float(
        np.linalg.norm(graph.polygons[src].center - t) + np.linalg.norm(l - t) + np.linalg.norm(graph.polygons[dst].center - l)
    )


def ability_action(ability: str, t: int, agent: AgentState, airborne: bool, fired_second: bool) -> tuple[Action, bool]:
    """Open-loop ability input for tick ``t``: full forward, jump on tick 0, second jump at the apex."""
    if ability == "pad":
        return Action(forward=1.0), fired_second
    if t == 0:
        return Action(jump=1.0, forward=1.0), fired_second
    if ability == "double_jump" and airborne and not fired_second and agent.velocity[1] <= 0.0:
        return Action(jump=1.0, forward=1.0), True
    return Action(forward=1.0), fired_second


def simulate_ability(m: MapDef, cfg: SimConfig, start, heading: float, ability: str, max_steps: int = 80):
    """Run an ability from ``start``; returns ``(landing position or None, trajectory)``."""
    agent = AgentState(np.asarray(start, dtype=np.float64), np.zeros(3), float(heading), True, 0, Action(), np.zeros(3))
    airborne = False
    second = False
    traj = [agent.position]
    for t in range(max_steps):
        a, second = ability_action(ability, t, agent, airborne, second)
        agent = apply_kinematics(agent, a, cfg, m)
        traj.append(agent.position)
        if box_overlap(m, agent_box(agent.position, cfg.half_extents), closed=False):
            return None, traj
        if not agent.grounded:
            airborne = True
        elif airborne:
            return agent.position, traj
    return None, traj


def _clear_start(m: MapDef, p: np.ndarray, half) -> np.ndarray | None:
    """Push a standing position horizontally out of any wall it overlaps."""
    p = p.copy()
    for _ in range(4):
        body = agent_box(p, half)
        hits = np.nonzero(overlap_mask(m, body, closed=False))[0]
        if not len(hits):
            return p if m.bounds.contains_box(body) else None
        lo, hi = m.solid_lo[hits[0]], m.solid_hi[hits[0]]
        pushes = []
        for ax in (0, 2):
            pushes.append((hi[ax] - (p[ax] - half[ax]) + 1e-6, ax, 1.0))
            pushes.append(((p[ax] + half[ax]) - lo[ax] + 1e-6, ax, -1.0))
        d, ax, sgn = min(pushes)
        if d > 0.5:
            return None
        p[ax] += sgn * d
    return None


def _takeoff_cells(graph: NavGraph, walk: np.ndarray, poly: NavPolygon):
    """Perimeter cells of ``poly`` next to a non-walkable cell of the same layer (inside the grid)."""
    i0, k0, i1, k1 = poly.cells
    j = poly.layer
    nx, _, nz = walk.shape
    out = []
    for i, _, k in poly.cell_iter():
        if not (i in (i0, i1) or k in (k0, k1)):
            continue
        for di, dk in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            a, b = i + di, k + dk
            if 0 <= a < nx and 0 <= b < nz and not walk[a, j, b]:
                out.append((i, k))
                break
    return out


def auto_jump_links(
    graph: NavGraph,
    m: MapDef,
    cfg: SimConfig,
    ability: str,
    headings: int = HEADINGS,
    stride: int = 1,
) -> NavGraph:
    """Add simulation-certified links for ``ability``; one (shortest) link per polygon pair."""
    if ability not in ABILITIES:
        raise ValueError(f"unknown ability {ability!r}")
    if ability == "double_jump" and cfg.max_jumps < 2:
        return graph
    half = cfg.half_extents
    cs = graph.cell_size
    walk = np.zeros(graph.dims, dtype=bool)
    for c in graph.walkable_cells():
        walk[c] = True
    starts: list[tuple[int, np.ndarray]] = []
    if ability == "pad":
        if not cfg.pads_enabled:
            return graph
        for pad in m.pads:
            c = (pad.trigger.lo + pad.trigger.hi) / 2
            p = np.array([c[0], pad.trigger.min[1], c[2]])
            pid = graph.lookup(p)
            if pid is not None:
                p[1] = graph.polygons[pid].y
                starts.append((pid, p))
    else:
        for poly in graph.polygons:
            for n, (i, k) in enumerate(_takeoff_cells(graph, walk, poly)):
                if n % stride:
                    continue
                p = np.array([graph.origin[0] + (i + 0.5) * cs, poly.y, graph.origin[2] + (k + 0.5) * cs])
                starts.append((poly.id, p))
    best: dict[tuple[int, int], NavEdge] = {}
    for src, p in starts:
        for h in range(headings):
            heading = 2.0 * math.pi * h / headings
            start = _clear_start(m, p, half)
            if start is None or graph.lookup(start) != src:
                continue
            landing, _ = simulate_ability(m, cfg, start, heading, ability)
            if landing is None:
                continue
            dst = graph.lookup(landing)
            if dst is None or dst == src or graph.has_adjacency(src, dst):
                continue
            cost = link_cost(graph, src, dst, start, landing)
            key = (src, dst)
            if key not in best or cost < best[key].cost:
                best[key] = NavEdge(src, dst, "link", cost, ability, tuple(map(float, start)), tuple(map(float, landing)), heading)
    existing = {(e.src, e.dst, e.ability) for e in graph.links}
    new = [e for key, e in sorted(best.items()) if (e.src, e.dst, e.ability) not in existing]
    return graph.with_edges(new)


def replay_link(graph: NavGraph, link: NavEdge, m: MapDef, cfg: SimConfig) -> int | None:
    """Polygon reached by replaying an auto link open-loop."""
    if link.heading is None:
        raise ValueError("manual links carry no replayable trajectory")
    landing, _ = simulate_ability(m, cfg, link.takeoff, link.heading, link.ability)
    return None if landing is None else graph.lookup(landing)


def add_manual_link(graph: NavGraph, takeoff, landing, ability: str) -> NavGraph:
    if ability not in ABILITIES:
        raise ValueError(f"unknown ability {ability!r}")
    src = graph.lookup(takeoff)
    if src is None:
        raise OffMeshError("takeoff", takeoff)
    dst = graph.lookup(landing)
    if dst is None:
        raise OffMeshError("landing", landing)
    e = NavEdge(src, dst, "link", link_cost(graph, src, dst, takeoff, landing), ability,
                tuple(float(v) for v in takeoff), tuple(float(v) for v in landing))
    return graph.with_edges([e])


def load_manual_links(graph: NavGraph, path: str | Path) -> NavGraph:
    for i, d in enumerate(json.loads(Path(path).read_text())):
        try:
            graph = add_manual_link(graph, d["takeoff"], d["landing"], d["ability"])
        except OffMeshError as exc:
            raise OffMeshError(f"link {i} {exc.which}", d[exc.which]) from None
    return graph


def components(graph: NavGraph) -> list[set[int]]:
    """Weakly connected components over all edges."""
    parent = list(range(len(graph.polygons)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for e in graph.edges:
        ra, rb = find(e.src), find(e.dst)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, set[int]] = {}
    for i in range(len(parent)):
        groups.setdefault(find(i), set()).add(i)
    return list(groups.values())


# ---------------------------------------------------------------- search


@dataclass(frozen=True)
class NavPath:
    waypoints: tuple[tuple[float, float, float], ...]
    kinds: tuple[str, ...]  # per segment: walk | jump | double_jump | pad
    polygons: tuple[int, ...] = ()
    cost: float = 0.0  # graph cost of the polygon sequence

    def __post_init__(self):
        if len(self.kinds) != max(len(self.waypoints) - 1, 0):
            raise ValueError("need one segment kind per consecutive waypoint pair")

    def length(self) -> float:
        w = np.asarray(self.waypoints, dtype=float)
        return float(np.linalg.norm(np.diff(w, axis=0), axis=1).sum()) if len(w) > 1 else 0.0


def dijkstra(graph: NavGraph, source: int, reverse: bool = False) -> dict[int, float]:
    adj: list[list[tuple[int, float]]] = [[] for _ in graph.polygons]
    for e in graph.edges:
        if reverse:
            adj[e.dst].append((e.src, e.cost))
        else:
            adj[e.src].append((e.dst, e.cost))
    dist = {source: 0.0}
    heap = [(0.0, source)]
    done = set()
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        for v, c in adj[u]:
            nd = d + c
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def astar_polygons(graph: NavGraph, src: int, dst: int, debug: bool = False):
    """Cheapest edge sequence from ``src`` to ``dst`` as ``(cost, [edges])`` or None."""
    goal_c = graph.polygons[dst].center
    h = lambda n: float(np.linalg.norm(graph.polygons[n].center - goal_c))
    exact = dijkstra(graph, dst, reverse=True) if debug else None
    g = {src: 0.0}
    came: dict[int, NavEdge] = {}
    heap = [(h(src), 0.0, src)]
    closed = set()
    while heap:
        _, gu, u = heapq.heappop(heap)
        if u in closed:
            continue
        closed.add(u)
        if exact is not None and h(u) > exact.get(u, math.inf) + 1e-9:
            raise HeuristicError(f"heuristic {h(u)} exceeds true cost {exact.get(u)} at polygon {u}")
        if u == dst:
            seq = []
            while u != src:
                e = came[u]
                seq.append(e)
                u = e.src
            return gu, seq[::-1]
        for e in graph.out_edges(u):
            nd = gu + e.cost
            if nd < g.get(e.dst, math.inf):
                g[e.dst] = nd
                came[e.dst] = e
                heapq.heappush(heap, (nd + h(e.dst), nd, e.dst))
    return None


def astar(graph: NavGraph, start, goal, debug: bool = False) -> NavPath | None:
    """Path between two on-mesh points, or None when the goal is unreachable."""
    s = graph.lookup(start)
    if s is None:
        raise OffMeshError("start", start)
    t = graph.lookup(goal)
    if t is None:
        raise OffMeshError("goal", goal)
    found = astar_polygons(graph, s, t, debug=debug)
    if found is None:
        return None
    cost, seq = found
    pts = [tuple(float(v) for v in start)]
    kinds: list[str] = []
    polys = [s]
    for e in seq:
        if e.kind == "adjacency":
            pts.append(e.via)
            kinds.append("walk")
        else:
            pts.append(e.takeoff)
            kinds.append("walk")
            pts.append(e.landing)
            kinds.append(e.ability)
        polys.append(e.dst)
    pts.append(tuple(float(v) for v in goal))
    kinds.append("walk")
    return NavPath(tuple(pts), tuple(kinds), tuple(polys), float(cost))


def line_of_sight(graph: NavGraph, a, b) -> bool:
    """Every sample of segment a-b lies over walkable cells near the interpolated height."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    n = max(2, int(math.ceil(np.linalg.norm((b - a)[[0, 2]]) / (graph.cell_size / 8))) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    return bool(graph.surfaces_near(a + t * (b - a), graph.step_height + 1e-9).all())


def smooth_path(graph: NavGraph, path: NavPath) -> NavPath:
    """Greedy shortcutting of walk runs; ability endpoints are kept."""
    w = path.waypoints
    if len(w) <= 2:
        return path
    out = [w[0]]
    kinds: list[str] = []
    i = 0
    while i < len(w) - 1:
        if path.kinds[i] != "walk":
            out.append(w[i + 1])
            kinds.append(path.kinds[i])
            i += 1
            continue
        # furthest j reachable through walk segments only with a clear straight line
        j = i + 1
        k = i + 1
        while k < len(w) - 1 and path.kinds[k] == "walk":
            k += 1
            if line_of_sight(graph, w[i], w[k]):
                j = k
        out.append(w[j])
        kinds.append("walk")
        i = j
    return replace(path, waypoints=tuple(out), kinds=tuple(kinds))


# ---------------------------------------------------------------- following


ALIGN_TOL = math.radians(15.0)
TAKEOFF_RADIUS = 0.5
POP_RADIUS = 0.75
STUCK_STEPS = 100


def _wrap(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass
class PathFollower:
    """Proportional steering along waypoints with ability triggers at link takeoffs."""

    path: NavPath
    cfg: SimConfig = field(default_factory=SimConfig)
    idx: int = 1
    mode: str = "walk"  # walk | air
    left_ground: bool = False
    fired_second: bool = False
    best: float = math.inf
    since_progress: int = 0
    stuck: bool = False

    @property
    def done(self) -> bool:
        return self.idx >= len(self.path.waypoints)

    def _steer(self, agent: AgentState, target) -> tuple[float, float]:
        d = np.asarray(target, float) - agent.position
        if abs(d[0]) < 1e-12 and abs(d[2]) < 1e-12:
            return 0.0, 0.0
        err = _wrap(math.atan2(d[0], d[2]) - agent.yaw)
        max_turn = self.cfg.turn_rate * self.cfg.dt
        rot = max(-1.0, min(1.0, err / max_turn))
        residual = err - rot * max_turn
        return rot, 1.0 if abs(residual) <= ALIGN_TOL else 0.0

    def _advance(self) -> None:
        self.idx += 1
        self.best = math.inf
        self.since_progress = 0

    def act(self, agent: AgentState) -> Action:
        w, kinds = self.path.waypoints, self.path.kinds
        if self.mode == "air":
            if not agent.grounded:
                self.left_ground = True
            elif self.left_ground:
                self.mode = "walk"
                self._advance()
        if self.mode == "walk":
            while not self.done:
                target = np.asarray(w[self.idx], float)
                dh = float(np.linalg.norm((target - agent.position)[[0, 2]]))
                is_takeoff = self.idx < len(kinds) and kinds[self.idx] != "walk"
                if is_takeoff and dh <= TAKEOFF_RADIUS:
                    self.mode = "air"
                    self.left_ground = False
                    self.fired_second = False
                    self._advance()
                    ability = kinds[self.idx - 1]
                    rot, _ = self._steer(agent, w[self.idx])
                    jump = 1.0 if ability in ("jump", "double_jump") else 0.0
                    return Action(jump=jump, forward=1.0, rotate=rot)
                if not is_takeoff and dh <= POP_RADIUS and abs(target[1] - agent.position[1]) <= 1.0:
                    self._advance()
                    continue
                break
            if self.done:
                return Action()
        target = np.asarray(w[self.idx], float)
        dist = float(np.linalg.norm(target - agent.position))
        if dist < self.best - 0.05:
            self.best, self.since_progress = dist, 0
        else:
            self.since_progress += 1
            if self.since_progress >= STUCK_STEPS:
                self.stuck = True
        rot, fwd = self._steer(agent, target)
        if self.mode == "air":
            jump = 0.0
            ability = kinds[self.idx - 1]
            if ability == "double_jump" and self.left_ground and not self.fired_second and agent.velocity[1] <= 0.0:
                jump, self.fired_second = 1.0, True
            return Action(jump=jump, forward=1.0, rotate=rot)
        return Action(forward=fwd, rotate=rot)


@dataclass
class FollowResult:
    success: bool
    stuck: bool
    steps: int
    agent: AgentState
    trace: list = field(default_factory=list)


def follow_path(m: MapDef, agent: AgentState, path: NavPath, cfg: SimConfig = SimConfig(), max_steps: int = 2000) -> FollowResult:
    f = PathFollower(path, cfg)
    trace = []
    for t in range(max_steps):
        a = f.act(agent)
        if f.done:
            return FollowResult(True, False, t, agent, trace)
        if f.stuck:
            return FollowResult(False, True, t, agent, trace)
        trace.append(a)
        agent = apply_kinematics(agent, a, cfg, m)
    f.act(agent)
    return FollowResult(f.done, f.stuck, max_steps, agent, trace)
