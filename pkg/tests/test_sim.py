import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import flat_map
from navgym.navmesh import auto_jump_links, generate_navmesh, walkable_mask
from navgym.sim import (
    Action,
    AgentState,
    CurriculumState,
    EpisodeState,
    SimConfig,
    TrajectoryWriter,
    apply_kinematics,
    compute_reward,
    episode_budget,
    reset,
    step,
    update_curriculum,
)
from navgym.world import Box, MapDef, agent_box, bake_occupancy, box_overlap

CFG = SimConfig()


def _agent(pos, **kw):
    return AgentState(np.asarray(pos, dtype=float), **kw)


def _episode(goal, start, max_steps=100):
    d0 = float(np.linalg.norm(np.asarray(goal) - np.asarray(start)))
    return EpisodeState(np.asarray(goal, dtype=float), d0, d0, 0, max_steps)


# ---------------------------------------------------------------- reward


def test_reward_examples():
    assert compute_reward(7.0, 8.0, -0.01, 1.0) == pytest.approx(0.99, abs=1e-12)
    assert compute_reward(6.0, 5.0, -0.01, 1.0) == -0.01
    assert compute_reward(0.8, 1.4, -0.01, 1.0) == pytest.approx(1.59, abs=1e-12)


def test_reward_matches_direct_formula():
    r = np.random.default_rng(0)
    d = r.uniform(0, 50, 100_000)
    best = r.uniform(0, 50, 100_000)
    alpha = -r.uniform(0, 0.1, 100_000)
    eps = r.uniform(0.1, 2, 100_000)
    got = np.array([compute_reward(*args) for args in zip(d, best, alpha, eps)])
    want = np.maximum(best - d, 0.0) + alpha + (d <= eps)
    assert np.array_equal(got, want)


@given(st.floats(0, 100), st.floats(0, 100))
def test_reward_lower_bound(d, best):
    assert compute_reward(d, best, -0.01, 1.0) >= -0.01


def _random_episode(m, rng, radius, cfg=CFG):
    cur = CurriculumState(radius, 5.0, 60.0)
    agent, ep, _ = reset(m, cur, rng, cfg)
    d0 = ep.d0
    progress, dists = 0.0, [d0]
    done = False
    while not done:
        a = Action.from_array(rng.uniform(-1, 1, 4))
        agent, ep_next, r, done = step(agent, ep, a, cfg, m)
        d_t = float(np.linalg.norm(ep.goal - agent.position))
        progress += r - cfg.step_penalty - (1.0 if d_t <= cfg.goal_epsilon else 0.0)
        dists.append(d_t)
        ep = ep_next
    return d0, progress, dists, ep


def test_telescoping_identity_random_policy(desk):
    rng = np.random.default_rng(3)
    for _ in range(1000):
        d0, progress, dists, ep = _random_episode(desk, rng, float(rng.choice([5.0, 10.0, 20.0])))
        assert abs(progress - (d0 - min(dists))) <= 1e-9
        assert ep.best_dist == min(dists)


def test_straight_run_progress_equals_distance_covered():
    m = flat_map(size=40)
    agent = _agent((0.0, 0.0, -10.0))
    ep = _episode((0.0, 0.0, 10.0), agent.position, 200)
    total_progress = 0.0
    for _ in range(15):
        agent, ep2, r, done = step(agent, ep, Action(forward=1.0), CFG, m)
        total_progress += r - CFG.step_penalty
        ep = ep2
    d_final = float(np.linalg.norm(ep.goal - agent.position))
    assert abs(total_progress - (ep.d0 - d_final)) <= 1e-9


def test_success_when_close():
    m = flat_map()
    agent = _agent((0.0, 0.0, 0.0))
    ep = _episode((0.5, 0.0, 0.0), agent.position)
    _, ep, r, done = step(agent, ep, Action(rotate=1.0), CFG, m)
    assert done and ep.done == "success"
    assert r >= 1.0 + CFG.step_penalty


def test_timeout_accrues_only_penalty():
    m = flat_map()
    agent = _agent((0.0, 0.0, 0.0))
    ep = _episode((5.0, 0.0, 0.0), agent.position, max_steps=10)
    total = 0.0
    for _ in range(10):
        agent, ep, r, done = step(agent, ep, Action(), CFG, m)
        total += r
    assert done and ep.done == "timeout"
    assert total == pytest.approx(10 * CFG.step_penalty, abs=1e-12)


def test_step_after_done_raises():
    m = flat_map()
    agent = _agent((0.0, 0.0, 0.0))
    ep = _episode((0.5, 0.0, 0.0), agent.position)
    agent, ep, _, _ = step(agent, ep, Action(), CFG, m)
    with pytest.raises(RuntimeError):
        step(agent, ep, Action(), CFG, m)


def test_best_dist_updates_after_reward():
    m = flat_map(size=40)
    agent = _agent((0.0, 0.0, 0.0))
    ep = _episode((0.0, 0.0, 10.0), agent.position)
    agent, ep1, r, _ = step(agent, ep, Action(forward=1.0), CFG, m)
    # progress uses the previous minimum (D_0 = 10), then the minimum moves
    assert r == pytest.approx(0.6 + CFG.step_penalty, abs=1e-12)
    assert ep1.best_dist == pytest.approx(9.4, abs=1e-12)


def test_budget_formula():
    assert episode_budget(5.0, CFG) == math.ceil(4 * 5 / 0.6) + 50
    assert episode_budget(60.0, CFG) == 400 + 50


# ---------------------------------------------------------------- kinematics


def test_jump_binarized():
    m = flat_map()
    a = apply_kinematics(_agent((0, 0, 0)), Action(jump=0.3), CFG, m)
    assert a.velocity[1] == CFG.jump_speed
    assert not a.grounded and a.jumps_used == 1
    b = apply_kinematics(_agent((0, 0, 0)), Action(jump=0.0), CFG, m)
    assert b.grounded and b.jumps_used == 0 and b.velocity[1] == 0.0


def test_double_jump_exhausted():
    m = flat_map()
    air = _agent((0, 3, 0), velocity=np.array([0.0, 2.0, 0.0]), grounded=False, jumps_used=2)
    nxt = apply_kinematics(air, Action(jump=1.0), CFG, m)
    assert nxt.jumps_used == 2
    assert nxt.velocity[1] == pytest.approx(2.0 - CFG.gravity * CFG.dt, abs=1e-12)


def test_second_jump_in_air():
    m = flat_map()
    air = _agent((0, 3, 0), velocity=np.array([0.0, -1.0, 0.0]), grounded=False, jumps_used=1)
    nxt = apply_kinematics(air, Action(jump=1.0), CFG, m)
    assert nxt.jumps_used == 2 and nxt.velocity[1] == CFG.jump_speed


def test_free_fall_one_step():
    m = flat_map()
    a = _agent((0, 5, 0), grounded=False)
    nxt = apply_kinematics(a, Action(), CFG, m)
    assert nxt.position[1] - 5.0 == pytest.approx(-CFG.gravity * CFG.dt**2, abs=1e-12)


def test_single_jump_apex_within_one_voxel():
    m = flat_map(height=20)
    a = apply_kinematics(_agent((0, 0, 0)), Action(jump=1.0), CFG, m)
    apex = a.position[1]
    while not a.grounded:
        a = apply_kinematics(a, Action(), CFG, m)
        apex = max(apex, a.position[1])
    assert abs(apex - CFG.jump_speed**2 / (2 * CFG.gravity)) <= 0.5


def test_rotation_and_strafe_frame():
    m = flat_map()
    a = apply_kinematics(_agent((0, 0, 0)), Action(rotate=1.0), CFG, m)
    assert a.yaw == pytest.approx(CFG.turn_rate * CFG.dt)
    s = apply_kinematics(_agent((0, 0, 0)), Action(strafe=1.0), CFG, m)
    assert s.position[0] == pytest.approx(CFG.strafe_speed * CFG.dt)
    f = apply_kinematics(_agent((0, 0, 0), yaw=math.pi / 2), Action(forward=1.0), CFG, m)
    assert f.position[0] == pytest.approx(CFG.move_speed * CFG.dt)
    assert abs(f.position[2]) < 1e-12


def test_wall_blocks_and_slides():
    wall = Box((1.0, 0.0, -5.0), (2.0, 3.0, 5.0))
    m = flat_map(solids=[wall])
    # heading diagonally into the wall: x is blocked, z keeps moving
    a = _agent((0.5, 0, 0), yaw=math.pi / 4)
    for _ in range(5):
        a = apply_kinematics(a, Action(forward=1.0), CFG, m)
    assert a.position[0] <= 1.0 - 0.3 + 1e-9
    assert a.position[2] > 1.0
    assert not box_overlap(m, agent_box(a.position, CFG.half_extents), closed=False)


def test_pad_launch():
    from navgym.world import JumpPad

    pad = JumpPad(Box((-1, 0, -1), (1, 0.2, 1)), 12.0)
    m = flat_map(pads=[pad])
    a = apply_kinematics(_agent((0, 0, 0)), Action(), CFG, m)
    assert a.velocity[1] == 12.0 and a.jumps_used == 1 and not a.grounded
    # pad launch leaves exactly one air jump
    a = apply_kinematics(a, Action(jump=1.0), CFG, m)
    assert a.jumps_used == 2
    off = apply_kinematics(_agent((0, 0, 0)), Action(), SimConfig(pads_enabled=False), m)
    assert off.grounded


def test_landing_resets_jumps():
    m = flat_map()
    a = _agent((0, 0.05, 0), velocity=np.array([0.0, -3.0, 0.0]), grounded=False, jumps_used=2)
    a = apply_kinematics(a, Action(), CFG, m)
    assert a.grounded and a.jumps_used == 0 and a.velocity[1] == 0.0 and a.position[1] == 0.0


def _random_walk(m, n, seed, cfg=CFG):
    rng = np.random.default_rng(seed)
    cur = CurriculumState(60.0, 5.0, 60.0)
    agent, _, _ = reset(m, cur, rng, cfg)
    acts = rng.uniform(-1, 1, (n, 4))
    jumps_since_ground = 0
    for t in range(n):
        prev_used = agent.jumps_used
        agent = apply_kinematics(agent, Action.from_array(acts[t]), cfg, m)
        on_pad = any(agent_box(agent.position, cfg.half_extents).intersects(p.trigger) for p in m.pads)
        if agent.grounded:
            assert agent.jumps_used == 0 and agent.velocity[1] == 0.0
            jumps_since_ground = 0
        elif on_pad:
            # a pad launch is a touch-down that spends the first slot
            jumps_since_ground = 1
        elif agent.jumps_used > prev_used and acts[t, 0] > 0:
            jumps_since_ground += 1
        yield agent, jumps_since_ground
        if t % 500 == 499:
            agent, _, _ = reset(m, cur, rng, cfg)
            jumps_since_ground = 0


def test_no_penetration_and_jump_cap(desk, faithful):
    for m in (desk, faithful):
        for agent, jumps in _random_walk(m, 100_000, seed=5):
            assert agent.jumps_used <= 2 and jumps <= 2
            assert not box_overlap(m, agent_box(agent.position, CFG.half_extents), closed=False)
            assert m.bounds.contains_box(agent_box(agent.position, CFG.half_extents))


def test_kinematics_deterministic(desk):
    a = [ag.position.tobytes() + ag.velocity.tobytes() for ag, _ in _random_walk(desk, 2000, seed=9)]
    b = [ag.position.tobytes() + ag.velocity.tobytes() for ag, _ in _random_walk(desk, 2000, seed=9)]
    assert a == b


def test_rooftops_need_double_jump_or_pad(faithful):
    grid = bake_occupancy(faithful, 0.5)
    graph = generate_navmesh(faithful, grid)
    tops = max(s.max[1] for s in faithful.solids)
    roofs = {p.id for p in graph.polygons if p.y in (3.5, 4.5, 5.5)}
    assert len(roofs) == 9 and tops == 5.5
    capped = SimConfig(max_jumps=1, pads_enabled=False)
    single = auto_jump_links(graph, faithful, capped, "jump", stride=3).links
    assert single and not {e.dst for e in single} & roofs
    assert auto_jump_links(graph, faithful, capped, "pad").links == []
    double = auto_jump_links(graph, faithful, CFG, "double_jump", stride=3).links
    assert {e.dst for e in double} & roofs
    pads = auto_jump_links(graph, faithful, CFG, "pad").links
    assert {e.dst for e in pads} & roofs


# ---------------------------------------------------------------- reset


def test_reset_radius_one_on_open_floor():
    m = flat_map()
    rng = np.random.default_rng(2)
    cur = CurriculumState(1.0, 5.0, 60.0)
    for _ in range(200):
        agent, ep, _ = reset(m, cur, rng)
        dx = ep.goal[[0, 2]] - agent.position[[0, 2]]
        assert np.linalg.norm(dx) <= 1.0
        assert ep.best_dist == ep.d0 and ep.step == 0


def test_reset_at_radius_max_covers_walkable_cells(desk, desk_grid):
    # 2 m buckets per surface height; cells baked at 0.5 m
    walk = walkable_mask(desk_grid)
    i, j, k = np.nonzero(walk)
    ys = desk_grid.origin[1] + j * desk_grid.cell_size
    want = set(zip(i // 4, np.round(ys, 3), k // 4))
    rng = np.random.default_rng(4)
    cur = CurriculumState(60.0, 5.0, 60.0)
    seen = set()
    for _ in range(10_000):
        _, ep, _ = reset(desk, cur, rng)
        c = desk_grid.cell_of(ep.goal)
        seen.add((c[0] // 4, round(float(ep.goal[1]), 3), c[2] // 4))
    assert len(seen & want) / len(want) >= 0.95


def test_single_cell_map_succeeds_immediately():
    bounds = Box((-5, -1, -5), (5, 5, 5))
    m = MapDef("tiny", bounds, (Box((-0.325, -1, -0.325), (0.325, 0, 0.325)),))
    rng = np.random.default_rng(0)
    agent, ep, _ = reset(m, CurriculumState(5.0, 5.0, 60.0), rng)
    assert ep.d0 <= CFG.goal_epsilon
    _, ep, r, done = step(agent, ep, Action(), CFG, m)
    assert done and ep.done == "success"


# ---------------------------------------------------------------- curriculum


def _feed(cur, outcomes):
    for o in outcomes:
        cur = update_curriculum(cur, o)
    return cur


def test_curriculum_strictly_above_threshold():
    cur = CurriculumState(5.0, 5.0, 60.0)
    assert _feed(cur, [True] * 41 + [False] * 9).radius == 10.0
    assert _feed(cur, [True] * 40 + [False] * 10).radius == 5.0


def test_curriculum_clamped_at_max():
    cur = CurriculumState(60.0, 5.0, 60.0)
    assert _feed(cur, [True] * 50).radius == 60.0


def test_curriculum_window_clears_on_advance():
    cur = _feed(CurriculumState(5.0, 5.0, 60.0), [True] * 50)
    assert cur.radius == 10.0 and cur.window == ()
    # a fresh window must fill again before the next advance
    assert _feed(cur, [True] * 49).radius == 10.0


@given(st.lists(st.booleans(), max_size=400))
def test_curriculum_gate_property(outcomes):
    cur = CurriculumState(5.0, 5.0, 60.0)
    window: list[bool] = []
    for o in outcomes:
        window = (window + [o])[-50:]
        nxt = update_curriculum(cur, o)
        should = len(window) == 50 and sum(window) > 40
        assert nxt.radius >= cur.radius
        assert (nxt.radius > cur.radius) == (should and cur.radius < 60.0)
        if should:
            window = []
        cur = nxt


def test_invalid_radius_rejected():
    with pytest.raises(ValueError):
        CurriculumState(70.0, 5.0, 60.0)


def test_trajectory_dump(tmp_path):
    p = tmp_path / "traj.jsonl"
    with TrajectoryWriter(p) as w:
        w.write(0, _agent((1, 2, 3)), Action(jump=1.0), -0.01, 4.0, "running")
    row = json.loads(p.read_text())
    assert set(row) == {"t", "pos", "vel", "yaw", "action", "reward", "D_t", "done"}
    assert row["pos"] == [1.0, 2.0, 3.0]
