"""Command-line entry points: bake, train, eval, compare, stats, ablate."""
from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import navmesh
from .config import ABLATIONS, ConfigError, RunConfig, from_dict, load_config, save_config
from .nn import NavNet, NetworkSpec, load_checkpoint
from .obs import stack
from .sac import select_action
from .sim import Action, CurriculumState, EpisodeState, SimConfig, episode_budget, reset, step, write_episode_csv
from .stats import InsufficientSamplesError, welch
from .train import OutputExistsError, evaluate, train
from .world import MapError, VoxelGrid, bake_occupancy, resolve_map

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
COMPARE_HEADER = ["pair", "rl_success", "rl_steps", "nav_reachable", "nav_success", "nav_steps", "nav_unreachable_rl_solved"]
ABLATION_MATRIX = {
    "base": [],
    "no_boxcast": ["no_boxcast"],
    "no_raycast": ["no_raycast"],
    "no_perception": ["no_boxcast", "no_raycast"],
    "no_abs_position": ["no_abs_position"],
    "no_lstm": ["no_lstm"],
    "no_curriculum": ["no_curriculum"],
    "her": ["her"],
}


class UsageError(Exception):
    pass


@dataclass
class EvalReport:
    episodes: int
    success_rate: float
    mean_length: float
    mean_return: float
    seed: int


def _guard(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise OutputExistsError(f"{path} exists; pass --force to overwrite")


def _resolve_map_arg(name: str):
    try:
        return resolve_map(name)
    except FileNotFoundError as exc:
        raise UsageError(f"map file not found: {exc.filename or name}") from None


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "budget", None) is not None:
        cfg = replace(cfg, budget=args.budget)
    if getattr(args, "deterministic", False):
        cfg = replace(cfg, deterministic=True)
    if getattr(args, "out", None):
        cfg = replace(cfg, out=args.out)
    if getattr(args, "map", None):
        cfg = replace(cfg, map=args.map)
    if getattr(args, "ablate", None):
        cfg = cfg.with_ablations([f for f in args.ablate.split(",") if f])
    return cfg


# ---------------------------------------------------------------- bake


def cmd_bake(args) -> int:
    m = _resolve_map_arg(args.map)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.map).name.replace(".map.json", "").replace(".json", "")
    cache = out / f"{stem}.navb"
    graph_path = out / f"{stem}.navgraph.json"
    _guard(cache, args.force)
    _guard(graph_path, args.force)
    grid = bake_occupancy(m, args.cell_size)
    grid.save(cache)
    graph = navmesh.generate_navmesh(m, grid)
    sim_cfg = SimConfig()
    for ability in args.abilities.split(",") if args.abilities else []:
        graph = navmesh.auto_jump_links(graph, m, sim_cfg, ability)
    graph.save(graph_path)
    print(f"cells {int(np.prod(grid.dims))} occupied {grid.count()} polygons {len(graph.polygons)} "
          f"edges {len(graph.edges)} links {len(graph.links)}")
    print(f"wrote {cache} and {graph_path}")
    return EXIT_OK


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    cfg = _run_config(args)
    res = train(cfg, cfg.out, force=args.force, resume=args.resume)
    if res.steps_to_target is not None:
        print(f"steps_to_target {res.steps_to_target} (env_steps {res.env_steps}, updates {res.updates})")
    else:
        print(f"target not reached (env_steps {res.env_steps}, updates {res.updates}, radius {res.radius})")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _spec_mismatch(expected: NetworkSpec, found: NetworkSpec) -> list[str]:
    diffs = []
    for f in fields(NetworkSpec):
        a, b = getattr(expected, f.name), getattr(found, f.name)
        if a != b:
            diffs.append(f"{f.name}: config {a} vs checkpoint {b}")
    return diffs


def load_policy(checkpoint: str, config_path: str | None = None) -> tuple[NavNet, RunConfig]:
    p = Path(checkpoint)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    spec, tensors, meta = load_checkpoint(p)
    if config_path:
        cfg = load_config(config_path)
    elif "config" in meta:
        cfg = from_dict(meta["config"])
    else:
        cfg = RunConfig()
    cfg = cfg.resolved()
    diffs = _spec_mismatch(cfg.net, spec)
    if diffs:
        raise ConfigError(["checkpoint network spec does not match the observation config: " + d for d in diffs])
    net = NavNet(spec)
    net.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("net/")})
    net.eval()
    return net, cfg


def cmd_eval(args) -> int:
    net, cfg = load_policy(args.checkpoint, args.config)
    m = _resolve_map_arg(args.map or cfg.map)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ep_csv = out / "episodes.csv"
    _guard(ep_csv, args.force)
    grid = bake_occupancy(m, cfg.cell_size)
    res = evaluate(net, m, grid, cfg.sim, cfg.obs, cfg.curriculum.radius_max, args.episodes, args.seed)
    write_episode_csv(ep_csv, [r.row() for r in res])
    n = len(res)
    report = EvalReport(
        n,
        sum(r.success for r in res) / n if n else 0.0,
        float(np.mean([r.steps for r in res])) if n else 0.0,
        float(np.mean([r.ret for r in res])) if n else 0.0,
        args.seed,
    )
    (out / "eval_summary.json").write_text(json.dumps(asdict(report), indent=2, sort_keys=True) + "\n")
    print(f"episodes {report.episodes} success_rate {report.success_rate:.3f} mean_length {report.mean_length:.1f} "
          f"mean_return {report.mean_return:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- compare


def _run_policy(net, m, grid, cfg: RunConfig, agent, ep) -> tuple[bool, int]:
    from .obs import build_observation

    hidden = None
    while True:
        obs = build_observation(agent, ep, grid, m, cfg.obs)
        acts, hidden, _ = select_action(net, stack([obs]), hidden, mode="mean")
        agent, ep, _, done = step(agent, ep, Action.from_array(acts[0]), cfg.sim, m)
        if done:
            return ep.done == "success", ep.step


def _run_navmesh(graph, m, cfg: RunConfig, agent, ep) -> tuple[bool | None, bool, int]:
    """Returns (reachable, success, steps)."""
    try:
        path = navmesh.astar(graph, agent.position, ep.goal)
    except navmesh.OffMeshError:
        return None, False, 0
    if path is None:
        return False, False, 0
    follower = navmesh.PathFollower(navmesh.smooth_path(graph, path), cfg.sim)
    while True:
        a = follower.act(agent)
        if follower.stuck:
            return True, False, ep.step
        agent, ep, _, done = step(agent, ep, a, cfg.sim, m)
        if done:
            return True, ep.done == "success", ep.step


def cmd_compare(args) -> int:
    net, cfg = load_policy(args.checkpoint, args.config)
    m = _resolve_map_arg(args.map or cfg.map)
    gp = Path(args.navgraph)
    if not gp.is_file():
        raise UsageError(f"navgraph not found: {gp}")
    graph = navmesh.NavGraph.load(gp)
    if args.links:
        graph = navmesh.load_manual_links(graph, args.links)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "compare.csv"
    _guard(table, args.force)
    grid = bake_occupancy(m, cfg.cell_size)
    rng = np.random.default_rng(args.seed)
    cur = CurriculumState(cfg.curriculum.radius_max, 0.0, cfg.curriculum.radius_max)
    rows = []
    for i in range(args.pairs):
        agent, ep, _ = reset(m, cur, rng, cfg.sim)
        rl_ok, rl_steps = _run_policy(net, m, grid, cfg, agent, ep)
        reach, nav_ok, nav_steps = _run_navmesh(graph, m, cfg, agent, ep)
        rows.append([i, int(rl_ok), rl_steps, "" if reach is None else int(reach), int(nav_ok), nav_steps,
                     int(reach is False and rl_ok)])
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARE_HEADER)
        w.writerows(rows)
    n = len(rows)
    if n:
        print(f"pairs {n} rl_success {sum(r[1] for r in rows) / n:.3f} navmesh_success {sum(r[4] for r in rows) / n:.3f} "
              f"navmesh_unreachable_rl_solved {sum(r[6] for r in rows)}")
    else:
        print("pairs 0")
    return EXIT_OK


# ---------------------------------------------------------------- stats


def steps_to_target(run: str | Path) -> float:
    """Steps-to-target of one run; runs that never reached the target count as their full step count."""
    p = Path(run)
    summary = p / "summary.json" if p.is_dir() else p
    if not summary.is_file():
        raise UsageError(f"run summary not found: {summary}")
    d = json.loads(summary.read_text())
    v = d.get("steps_to_target")
    return float(v if v is not None else d["env_steps"])


def cmd_stats(args) -> int:
    a = [steps_to_target(r) for r in args.a]
    b = [steps_to_target(r) for r in args.b]
    try:
        r = welch(a, b)
    except InsufficientSamplesError as exc:
        raise UsageError(str(exc)) from None
    print(f"t {r.t:.6g} df {r.df:.6g} p {r.p:.6g} mean_a {r.mean_a:.6g} mean_b {r.mean_b:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------- ablate


def cmd_ablate(args) -> int:
    base = _run_config(args)
    names = args.configs.split(",") if args.configs else list(ABLATION_MATRIX)
    unknown = [n for n in names if n not in ABLATION_MATRIX]
    if unknown:
        raise UsageError(f"unknown ablation config(s): {', '.join(unknown)}")
    seeds = [int(s) for s in args.seeds.split(",")]
    root = Path(base.out)
    results: dict[str, list[float]] = {}
    for name in names:
        for seed in seeds:
            cfg = replace(base.with_ablations(ABLATION_MATRIX[name]), seed=seed, out=str(root / name / f"seed{seed}"))
            run_dir = Path(cfg.out)
            if (run_dir / "summary.json").exists() and not args.force:
                print(f"{name} seed {seed}: reusing {run_dir}")
            else:
                train(cfg, run_dir, force=True)
            results.setdefault(name, []).append(steps_to_target(run_dir))
    rows = []
    for name, vals in results.items():
        line = {"config": name, "median_steps_to_target": statistics.median(vals), "n": len(vals)}
        if name != "base" and "base" in results and len(vals) >= 2 and len(results["base"]) >= 2:
            w = welch(results["base"], vals)
            line.update(t=w.t, df=w.df, p=w.p)
        rows.append(line)
        print(" ".join(f"{k} {v}" for k, v in line.items()))
    (root / "ablation_summary.json").write_text(json.dumps(rows, indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="navgym", description="3D navigation with recurrent SAC and a NavMesh baseline")
    sub = p.add_subparsers(dest="cmd", required=True)

    def run_flags(sp):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--ablate", help=f"comma list of {','.join(ABLATIONS)}")
        sp.add_argument("--deterministic", action="store_true")
        sp.add_argument("--budget", type=int, help="environment-step budget")
        sp.add_argument("--out")
        sp.add_argument("--force", action="store_true")
        sp.add_argument("--map")

    b = sub.add_parser("bake", help="bake the occupancy cache and navgraph for a map")
    b.add_argument("map")
    b.add_argument("--cell-size", type=float, default=0.5)
    b.add_argument("--out", default="baked")
    b.add_argument("--abilities", default="jump,double_jump,pad", help="auto links to synthesize (empty for none)")
    b.add_argument("--force", action="store_true")
    b.set_defaults(func=cmd_bake)

    t = sub.add_parser("train", help="train a policy")
    run_flags(t)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint at the final curriculum radius")
    e.add_argument("checkpoint")
    e.add_argument("--map")
    e.add_argument("--config")
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default="eval")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="policy vs navmesh path following on sampled start/goal pairs")
    c.add_argument("checkpoint")
    c.add_argument("navgraph")
    c.add_argument("--map")
    c.add_argument("--config")
    c.add_argument("--links", help="manual link file")
    c.add_argument("--pairs", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default="compare")
    c.add_argument("--force", action="store_true")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("stats", help="Welch's t-test on steps-to-target of two groups of runs")
    s.add_argument("--a", nargs="+", required=True, help="run directories (or summary.json files) of group A")
    s.add_argument("--b", nargs="+", required=True)
    s.set_defaults(func=cmd_stats)

    a = sub.add_parser("ablate", help="run the ablation matrix over seeds")
    run_flags(a)
    a.add_argument("--seeds", default="0,1,2,3,4")
    a.add_argument("--configs", help=f"comma list of {','.join(ABLATION_MATRIX)}")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigError, OutputExistsError, MapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures end with a message and exit code 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
