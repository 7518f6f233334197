import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import flat_map
from navgym.obs import (
    N_ABS,
    N_SCALARS,
    ObsConfig,
    Observation,
    build_observation,
    cast_depth_rays,
    crop_occupancy,
    relative_goal_features,
)
from navgym.sim import Action, AgentState, CurriculumState, EpisodeState, SimConfig, apply_kinematics, reset, step
from navgym.world import Box, MapDef, bake_occupancy

CFG = ObsConfig()


def _agent(pos, yaw=0.0):
    return AgentState(np.asarray(pos, dtype=float), yaw=yaw)


def _ep(goal):
    return EpisodeState(np.asarray(goal, dtype=float), 10.0, 10.0)


# ---------------------------------------------------------------- occupancy


def test_crop_mid_air_is_empty():
    m = flat_map(size=40, height=20)
    g = bake_occupancy(m, 0.5)
    assert crop_occupancy(g, (0.0, 8.0, 0.0), CFG).sum() == 0


def test_crop_standing_on_floor_lower_half_full():
    m = flat_map(size=40)
    g = bake_occupancy(m, 0.5)
    w = crop_occupancy(g, (0.0, 0.0, 0.0), CFG)
    assert w[:, :4, :].all()
    assert not w[:, 4:, :].any()


def test_crop_grid_cell_size_mismatch():
    g = bake_occupancy(flat_map(), 0.25)
    with pytest.raises(ValueError, match="0.25"):
        crop_occupancy(g, (0, 0, 0), CFG)


def _oracle_window(m, grid, center, cfg):
    """Geometric window: each cell tested against the solids; outside the grid reads 1."""
    dims = np.asarray(cfg.occ_dims)
    cs = grid.cell_size
    org = np.asarray(grid.origin)
    c = np.floor((np.asarray(center) - org) / cs).astype(int)
    idx = np.indices(cfg.occ_dims).reshape(3, -1).T + (c - dims // 2)
    lo = org + idx * cs
    hi = lo + cs
    inside = np.all((idx >= 0) & (idx < np.asarray(grid.dims)), axis=1)
    hit = np.zeros(len(idx), dtype=bool)
    for s in m.solids:
        hit |= np.all((lo < s.hi) & (s.lo < hi), axis=1)
    return np.where(inside, hit, True).reshape(cfg.occ_dims).astype(np.uint8)


def test_crop_matches_geometric_oracle(desk, desk_grid):
    r = np.random.default_rng(21)
    lo, hi = desk.bounds.lo - 3, desk.bounds.hi + 3
    for _ in range(1000):
        c = lo + (hi - lo) * r.random(3)
        assert np.array_equal(crop_occupancy(desk_grid, c, CFG), _oracle_window(desk, desk_grid, c, CFG))


@given(st.tuples(st.integers(-20, 20), st.integers(-4, 4), st.integers(-20, 20)),
       st.tuples(*[st.floats(-9.9, 9.9)] * 3))
def test_crop_translation(shift_cells, center):
    base = flat_map(solids=[Box((-3, 0, -3), (1, 2.5, 2)), Box((2, 0, 2), (4, 1, 6))])
    off = np.asarray(shift_cells) * 0.5
    g0 = bake_occupancy(base, 0.5)
    g1 = bake_occupancy(base.translated(off), 0.5)
    c = np.asarray(center)
    c[1] = min(max(c[1], -0.9), 9.9)
    assert np.array_equal(crop_occupancy(g0, c, CFG), crop_occupancy(g1, c + off, CFG))


# ---------------------------------------------------------------- depth


def test_upward_rays_miss():
    m = flat_map()
    cfg = ObsConfig(depth_rays=(3, 3), vfov=math.pi / 2)
    d = cast_depth_rays(m, _agent((0, 0, 0)), cfg)
    assert np.all(d[:, 2] == 1.0)


def test_wall_three_meters_ahead():
    m = flat_map(solids=[Box((-5, 0, 3), (5, 5, 4))])
    cfg = ObsConfig(depth_rays=(3, 3))
    d = cast_depth_rays(m, _agent((0, 0, 0)), cfg)
    assert d[1, 1] == pytest.approx(0.1, abs=1e-7)


def _rotate_box(b, eye, quarter):
    """Rotate about the vertical axis through ``eye`` by quarter * 90 degrees (yaw sense)."""
    ang = quarter * math.pi / 2
    c, s = round(math.cos(ang)), round(math.sin(ang))
    corners = []
    for x in (b.min[0], b.max[0]):
        for z in (b.min[2], b.max[2]):
            dx, dz = x - eye[0], z - eye[2]
            corners.append((eye[0] + dx * c + dz * s, eye[2] - dx * s + dz * c))
    xs, zs = zip(*corners)
    return Box((min(xs), b.min[1], min(zs)), (max(xs), b.max[1], max(zs)))


@given(st.integers(0, 2**31), st.integers(1, 3), st.floats(-math.pi, math.pi))
def test_depth_frame_equivalence(seed, quarter, yaw):
    r = np.random.default_rng(seed)
    bounds = Box((-30, -1, -30), (30, 12, 30))
    solids = [Box((-30, -1, -30), (30, 0, 30))]
    for _ in range(6):
        c = r.uniform(-12, 12, 3)
        size = r.uniform(0.5, 5, 3)
        solids.append(Box((c[0], 0.0, c[2]), (c[0] + size[0], size[1] * 2, c[2] + size[2])))
    m = MapDef("scene", bounds, tuple(solids))
    eye = np.array([0.0, 0.0, 0.0])
    rotated = MapDef("rot", bounds, tuple(_rotate_box(b, eye, quarter) for b in solids))
    a = cast_depth_rays(m, _agent(eye, yaw), CFG)
    b = cast_depth_rays(rotated, _agent(eye, yaw + quarter * math.pi / 2), CFG)
    assert np.max(np.abs(a - b)) <= 1e-6


def test_depth_decreases_toward_wall():
    m = flat_map(size=40, solids=[Box((-5, 0, 10), (5, 5, 11))])
    cfg = ObsConfig(depth_rays=(3, 3))
    prev = None
    for z in np.arange(0.0, 9.0, 1.0):
        d = cast_depth_rays(m, _agent((0, 0, z)), cfg)[1, 1]
        if prev is not None:
            assert d < prev
        prev = d


def test_depth_in_unit_interval(desk):
    r = np.random.default_rng(5)
    for _ in range(200):
        p = r.uniform(-19, 19, 3)
        p[1] = r.uniform(0, 8)
        d = cast_depth_rays(desk, _agent(p, r.uniform(-3, 3)), CFG)
        assert d.shape == CFG.depth_rays and np.all((0 <= d) & (d <= 1))


# ---------------------------------------------------------------- assembly


def test_goal_straight_ahead(desk, desk_grid):
    yaw = 0.7
    fwd = np.array([math.sin(yaw), 0.0, math.cos(yaw)])
    pos = np.array([0.0, 0.0, 0.0])
    o = build_observation(_agent(pos, yaw), _ep(pos + 5 * fwd), desk_grid, desk, CFG)
    scale = max(desk.half_extent[0], desk.half_extent[2])
    np.testing.assert_allclose(o.scalars[6:9], [0.0, 0.0, 5 / scale], atol=1e-6)


def test_no_abs_position_mask(desk, desk_grid):
    agent, ep = _agent((1, 0, 2), 0.3), _ep((5, 0, 5))
    full = build_observation(agent, ep, desk_grid, desk, CFG)
    masked = build_observation(agent, ep, desk_grid, desk, ObsConfig(use_abs_positions=False))
    assert np.array_equal(masked.abs_positions, np.zeros(N_ABS))
    assert np.array_equal(full.occupancy, masked.occupancy)
    assert np.array_equal(full.depth, masked.depth)
    assert np.array_equal(full.scalars, masked.scalars)
    assert np.abs(full.abs_positions).max() > 0


@pytest.mark.parametrize("flags", [dict(use_occupancy=False), dict(use_depth=False), dict(use_abs_positions=False),
                                   dict(use_occupancy=False, use_depth=False)])
def test_shapes_stable_under_ablation(desk, desk_grid, flags):
    o = build_observation(_agent((0, 0, 0)), _ep((3, 0, 3)), desk_grid, desk, ObsConfig(**flags))
    assert o.occupancy.shape == CFG.occ_dims and o.depth.shape == CFG.depth_rays
    assert o.scalars.shape == (N_SCALARS,) and o.abs_positions.shape == (N_ABS,)


def test_stationary_accel_zero(desk, desk_grid):
    cfg = SimConfig()
    agent = _agent((0, 0, 0))
    ep = _ep((5, 0, 5))
    for _ in range(2):
        agent, ep, _, _ = step(agent, ep, Action(), cfg, desk)
    o = build_observation(agent, ep, desk_grid, desk, CFG)
    assert np.array_equal(o.scalars[3:6], np.zeros(3))


def test_relative_goal_helper_matches_build(desk, desk_grid):
    agent, ep = _agent((2, 1, -3), 1.1), _ep((-4, 0, 6))
    o = build_observation(agent, ep, desk_grid, desk, CFG)
    assert np.array_equal(o.scalars[6:9], relative_goal_features(agent.position, agent.yaw, ep.goal, desk))


def test_scalars_bounded_over_random_steps(desk, faithful):
    cfg = ObsConfig(use_occupancy=False, use_depth=False)
    sim = SimConfig()
    rng = np.random.default_rng(8)
    worst = 0.0
    for m in (desk, faithful):
        cur = CurriculumState(60.0, 5.0, 60.0)
        agent, ep, _ = reset(m, cur, rng, sim)
        for t in range(50_000):
            agent = apply_kinematics(agent, Action.from_array(rng.uniform(-1, 1, 4)), sim, m)
            o = build_observation(agent, ep, None, m, cfg)
            worst = max(worst, float(np.abs(o.scalars).max()), float(np.abs(o.abs_positions).max()))
            if t % 400 == 399:
                agent, ep, _ = reset(m, cur, rng, sim)
    assert worst <= 8.0


def test_observation_bytes_roundtrip(desk, desk_grid):
    o = build_observation(_agent((0, 0, 0), 0.4), _ep((3, 0, 3)), desk_grid, desk, CFG)
    data = o.to_bytes()
    back = Observation.from_bytes(data, CFG)
    assert back.to_bytes() == data
    with pytest.raises(ValueError, match="expected"):
        Observation.from_bytes(data[:-4], CFG)
