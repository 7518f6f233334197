import hashlib
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from conftest import flat_map
from navgym.world import (
    Box,
    MapDef,
    MapParseError,
    MapValidationError,
    OccupancyCapError,
    UnwalkableRegionError,
    VoxelGrid,
    agent_box,
    bake_occupancy,
    box_overlap,
    builtin_map_path,
    load_map,
    map_from_dict,
    raycast,
    raycast_many,
    sample_walkable_point,
)

DESK_SHA256 = "03e8ea3758337656affae36155e0200a11f1b1f75e93bd98508bc30d268e916d"


def _doc(**over):
    doc = {
        "name": "one",
        "bounds": {"min": [-5, -1, -5], "max": [5, 5, 5]},
        "solids": [{"min": [-5, -1, -5], "max": [5, 0, 5]}],
    }
    doc.update(over)
    return doc


# ---------------------------------------------------------------- loading


def test_minimal_map():
    m = map_from_dict(_doc())
    assert len(m.solids) == 1 and len(m.pads) == 0


def test_solid_outside_bounds_named():
    solids = [{"min": [-5, -1, -5], "max": [5, 0, 5]}] * 3 + [{"min": [4, 0, 4], "max": [6, 1, 6]}]
    with pytest.raises(MapValidationError, match="solid 3 outside bounds"):
        map_from_dict(_doc(solids=solids))


def test_desk_fixture_hash_and_counts():
    path = builtin_map_path("toy_desk")
    assert hashlib.sha256(path.read_bytes()).hexdigest() == DESK_SHA256
    m = load_map(path)
    assert len(m.solids) == 4 and len(m.pads) == 1


def test_parse_error_reports_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n "name": "x",\n "bounds": oops\n}')
    with pytest.raises(MapParseError, match="line 3"):
        load_map(p)


def test_missing_field_named():
    doc = _doc()
    del doc["solids"]
    with pytest.raises(MapParseError, match="solids"):
        map_from_dict(doc)


def test_inverted_box_rejected():
    with pytest.raises(MapValidationError, match=r"solids\[0\]"):
        map_from_dict(_doc(solids=[{"min": [0, 0, 0], "max": [1, -1, 1]}]))


def test_negative_pad_speed_rejected():
    pad = {"trigger": {"min": [0, 0, 0], "max": [1, 0.2, 1]}, "launch_speed": -3}
    with pytest.raises(MapValidationError, match="launch_speed"):
        map_from_dict(_doc(pads=[pad]))


def test_spawn_region_without_surface_rejected():
    with pytest.raises(MapValidationError, match="spawn_region"):
        map_from_dict(_doc(spawn_region={"min": [-1, 2, -1], "max": [1, 3, 1]}))


def test_map_roundtrip(desk):
    again = map_from_dict(json.loads(json.dumps(desk.to_dict())))
    assert again.to_dict() == desk.to_dict()


# ---------------------------------------------------------------- raycast


def test_raycast_down_to_floor():
    m = flat_map()
    assert raycast(m, (0, 1, 0), (0, -1, 0), 10.0) == 1.0


def test_raycast_parallel_miss():
    m = flat_map()
    assert raycast(m, (0, 1, 0), (1, 0, 0), 100.0) is None


def test_raycast_rejects_non_unit():
    with pytest.raises(ValueError):
        raycast(flat_map(), (0, 1, 0), (0, -2, 0), 10.0)


def test_raycast_respects_max_dist():
    m = flat_map()
    assert raycast(m, (0, 1, 0), (0, -1, 0), 0.5) is None
    assert raycast(m, (0, 1, 0), (0, -1, 0), 1.0) == 1.0


_FACES = []
for axis in range(3):
    for side in (0, 1):
        _FACES.append((axis, side))


def _triangle_hit(o, d, a, b, c):
    """Moller-Trumbore; returns t or None."""
    e1, e2 = b - a, c - a
    p = np.cross(d, e2)
    det = e1 @ p
    if abs(det) < 1e-15:
        return None
    inv = 1.0 / det
    s = o - a
    u = (s @ p) * inv
    if u < -1e-12 or u > 1 + 1e-12:
        return None
    q = np.cross(s, e1)
    v = (d @ q) * inv
    if v < -1e-12 or u + v > 1 + 1e-12:
        return None
    return (e2 @ q) * inv


def _box_triangles(lo, hi):
    """Two triangles per face, with the outward normal of the face."""
    out = []
    for axis, side in _FACES:
        u, v = [k for k in range(3) if k != axis]
        corners = []
        for cu, cv in ((0, 0), (1, 0), (1, 1), (0, 1)):
            p = np.empty(3)
            p[axis] = hi[axis] if side else lo[axis]
            p[u] = hi[u] if cu else lo[u]
            p[v] = hi[v] if cv else lo[v]
            corners.append(p)
        n = np.zeros(3)
        n[axis] = 1.0 if side else -1.0
        out.append((corners[0], corners[1], corners[2], n))
        out.append((corners[0], corners[2], corners[3], n))
    return out


def _oracle_ray(m, o, d, max_dist):
    best = math.inf
    for s in m.solids:
        for a, b, c, n in _box_triangles(s.lo, s.hi):
            if d @ n >= 0:  # only faces the ray enters through
                continue
            t = _triangle_hit(o, d, a, b, c)
            if t is not None and 0 < t <= max_dist:
                best = min(best, t)
    return best


def test_raycast_matches_triangle_oracle(desk):
    r = np.random.default_rng(7)
    lo, hi = desk.bounds.lo, desk.bounds.hi
    origins = lo + (hi - lo) * r.random((1000, 3))
    dirs = r.normal(size=(1000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    got = raycast_many(desk, origins, dirs, 60.0)
    for o, d, t in zip(origins, dirs, got):
        want = _oracle_ray(desk, o, d, 60.0)
        if math.isinf(want):
            assert math.isinf(t)
        else:
            assert abs(t - want) <= 1e-9


@given(
    st.tuples(*[st.floats(-19.5, 19.5)] * 3),
    st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: 1e-3 < np.linalg.norm(v)),
)
def test_raycast_hit_point_overlaps(origin, direction):
    m = map_from_dict(json.loads(builtin_map_path("toy_desk").read_text()))
    o = np.array(origin)
    o[1] = min(max(o[1], -0.9), 10.9)
    d = np.array(direction) / np.linalg.norm(direction)
    t = raycast(m, o, d, 80.0)
    if t is not None:
        p = o + (t + 1e-6) * d
        assert box_overlap(m, Box(tuple(p - 1e-12), tuple(p + 1e-12)))


# ---------------------------------------------------------------- overlap


def test_overlap_inside_and_touching():
    m = flat_map()
    assert box_overlap(m, Box((-1, -0.8, -1), (1, -0.2, 1)))
    touching = Box((-1, 0.0, -1), (1, 1.0, 1))
    assert box_overlap(m, touching)
    assert not box_overlap(m, touching, closed=False)
    assert not box_overlap(m, Box((-1, 0.1, -1), (1, 1.0, 1)))


def test_overlap_matches_interval_oracle(desk):
    r = np.random.default_rng(11)
    lo, hi = desk.bounds.lo, desk.bounds.hi
    for _ in range(1000):
        c = lo + (hi - lo) * r.random(3)
        # snap some corners to solid faces so touching cases are exercised
        if r.random() < 0.3:
            s = desk.solids[r.integers(len(desk.solids))]
            c[r.integers(3)] = s.max[r.integers(3)]
        size = r.random(3) * 4 + 1e-3
        q = Box(tuple(c - size / 2), tuple(c + size / 2))
        want = any(all(q.min[k] <= s.max[k] and s.min[k] <= q.max[k] for k in range(3)) for s in desk.solids)
        assert box_overlap(desk, q) == want


# ---------------------------------------------------------------- baking


def test_bake_empty_map():
    m = MapDef("empty", Box((0, 0, 0), (4, 4, 4)), ())
    g = bake_occupancy(m, 0.5)
    assert g.dims == (8, 8, 8) and g.count() == 0


def test_bake_two_by_two_by_one():
    m = MapDef("b", Box((0, 0, 0), (4, 4, 4)), (Box((1, 1, 1), (2, 2, 1.5)),))
    assert bake_occupancy(m, 0.5).count() == 4


def test_bake_matches_per_cell_oracle(desk, desk_grid):
    g = desk_grid
    expected = np.zeros(g.dims, dtype=bool)
    for i in range(g.dims[0]):
        for j in range(g.dims[1]):
            for k in range(g.dims[2]):
                expected[i, j, k] = box_overlap(desk, g.cell_box(i, j, k), closed=False)
    assert g.count() == int(expected.sum())
    assert np.array_equal(g.occupied, expected)


def test_bake_cap_names_counts(desk):
    with pytest.raises(OccupancyCapError, match="153600 cells, cap allows 1000"):
        bake_occupancy(desk, 0.5, max_cells=1000)


def test_occupancy_cache_roundtrip(tmp_path, desk_grid):
    p = tmp_path / "desk.navb"
    desk_grid.save(p)
    data = p.read_bytes()
    assert data[:4] == b"NAVB"
    assert desk_grid.equals(VoxelGrid.load(p))
    assert VoxelGrid.load(p).to_bytes() == data


def test_occupancy_cache_rejects_garbage():
    with pytest.raises(ValueError, match="magic"):
        VoxelGrid.from_bytes(b"XXXX" + bytes(60))
    with pytest.raises(ValueError, match="truncated"):
        VoxelGrid.from_bytes(b"NAVB")


_box = st.tuples(
    st.tuples(*[st.integers(0, 15)] * 3), st.tuples(*[st.integers(1, 6)] * 3)
).map(lambda t: Box(tuple(v / 2 for v in t[0]), tuple((a + b) / 2 for a, b in zip(t[0], t[1]))))


@given(st.lists(_box, min_size=1, max_size=6), st.randoms(use_true_random=False))
def test_bake_order_independent_and_idempotent(solids, rnd):
    bounds = Box((0, 0, 0), (11, 11, 11))
    shuffled = list(solids)
    rnd.shuffle(shuffled)
    a = bake_occupancy(MapDef("a", bounds, tuple(solids)), 0.5)
    b = bake_occupancy(MapDef("b", bounds, tuple(shuffled + solids[:1])), 0.5)
    assert a.equals(b)
    assert a.equals(bake_occupancy(MapDef("a", bounds, tuple(solids)), 0.5))


@given(st.lists(_box, min_size=1, max_size=6), st.sampled_from([0.25, 0.4, 0.7]))
def test_cells_with_center_inside_solid_are_set(solids, cs):
    m = MapDef("r", Box((0, 0, 0), (11, 11, 11)), tuple(solids))
    g = bake_occupancy(m, cs)
    idx = np.indices(g.dims).reshape(3, -1).T
    centers = np.asarray(g.origin) + (idx + 0.5) * cs
    for s in solids:
        inside = np.all((centers > s.lo) & (centers < s.hi), axis=1)
        assert g.occupied[tuple(idx[inside].T)].all()


# ---------------------------------------------------------------- sampling


def test_sample_on_open_floor(rng):
    m = flat_map()
    p = sample_walkable_point(m, Box((-3, -0.5, -3), (3, 4, 3)), rng)
    assert abs(p[1] - 0.0) <= 1e-6


def test_sample_inside_solid_fails(rng):
    m = flat_map(solids=[Box((-4, 0, -4), (4, 5, 4))])
    with pytest.raises(UnwalkableRegionError):
        sample_walkable_point(m, Box((-1, 1, -1), (1, 2, 1)), rng)


def test_two_platforms_split_evenly(rng):
    a = Box((-8, 0, -2), (-4, 1, 2))
    b = Box((4, 0, -2), (8, 1, 2))
    m = flat_map(solids=[a, b])
    region = Box((-10, 0.5, -10), (10, 3, 10))
    pts = np.array([sample_walkable_point(m, region, rng) for _ in range(10_000)])
    left = int((pts[:, 0] < 0).sum())
    assert abs(left / 10_000 - 0.5) <= 0.03
    chi2 = stats.chisquare([left, 10_000 - left])
    assert chi2.pvalue > 0.05


@given(st.integers(0, 2**32 - 1))
def test_sampled_points_are_clear(seed):
    m = map_from_dict(json.loads(builtin_map_path("toy_desk").read_text()))
    p = sample_walkable_point(m, m.bounds, np.random.default_rng(seed))
    assert not box_overlap(m, agent_box(p, (0.3, 0.9, 0.3)), closed=False)
    assert m.bounds.contains_box(agent_box(p, (0.3, 0.9, 0.3)))
