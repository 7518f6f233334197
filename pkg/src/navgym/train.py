"""Training loop, evaluation and the metrics/checkpoint files they produce."""
from __future__ import annotations

import csv
import json
import math
import os
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, save_config, to_dict
from .nn import HiddenState, NavNet, load_checkpoint, save_checkpoint, set_determinism
from .obs import ObsConfig, stack
from .sac import EpisodeBuilder, ReplayBuffer, SacAgent, relabel_her, sample_batch, select_action, update
from .sim import Action, CurriculumState, NavEnv, SimConfig, update_curriculum
from .world import MapDef, VoxelGrid, bake_occupancy, resolve_map

METRICS_HEADER = ["env_steps", "updates", "radius", "success_rate", "mean_return", "critic_loss", "policy_loss", "alpha", "mean_q"]
CHECKPOINT_NAME = "latest.navk"


class OutputExistsError(FileExistsError):
    pass


@dataclass
class EpisodeResult:
    episode: int
    radius: float
    steps: int
    success: bool
    ret: float

    def row(self) -> list:
        return [self.episode, self.radius, self.steps, int(self.success), repr(self.ret)]


@dataclass
class TrainResult:
    env_steps: int
    updates: int
    radius: float
    steps_to_target: int | None
    eval_success: float | None
    out: Path


def thread_cap() -> int | None:
    v = os.environ.get("NAVGYM_THREADS")
    if not v:
        return None
    n = int(v)
    if n < 1:
        raise ValueError("NAVGYM_THREADS must be >= 1")
    return n


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _hidden_rows(hidden: HiddenState | None, rows) -> HiddenState | None:
    if hidden is None or not rows:
        return hidden
    keep = torch.ones(hidden.h.shape[0], 1, dtype=hidden.h.dtype)
    keep[list(rows)] = 0.0
    return HiddenState(hidden.h * keep, hidden.c * keep)


def _obs_batch(obs_list) -> dict[str, np.ndarray]:
    return stack(obs_list)


def evaluate(
    net: NavNet,
    m: MapDef,
    grid: VoxelGrid,
    sim_cfg: SimConfig,
    obs_cfg: ObsConfig,
    radius: float,
    episodes: int,
    seed: int,
    batch: int = 10,
) -> list[EpisodeResult]:
    """Mean-mode episodes at a fixed spawn radius; episode i always uses the same spawn seed."""
    cur = CurriculumState(radius=radius, radius_step=0.0, radius_max=radius)
    results: list[EpisodeResult] = []
    net.eval()
    for lo in range(0, episodes, batch):
        idx = list(range(lo, min(lo + batch, episodes)))
        envs = [NavEnv(m, grid, sim_cfg, obs_cfg, seed=[seed, i]) for i in idx]
        obs = [e.reset(cur) for e in envs]
        hidden = None
        live = list(range(len(envs)))
        # the batch width stays fixed so numerics do not depend on which episodes finished
        while live:
            acts, hidden, _ = select_action(net, _obs_batch(obs), hidden, mode="mean")
            nxt = []
            for j in live:
                o, _, done = envs[j].step(Action.from_array(acts[j]))
                obs[j] = o
                if done:
                    ep = envs[j].episode
                    results.append(EpisodeResult(idx[j], radius, ep.step, ep.done == "success", envs[j].ep_return))
                else:
                    nxt.append(j)
            live = nxt
    results.sort(key=lambda r: r.episode)
    return results


class Trainer:
    """Lockstep collectors feeding one learner; one collector in deterministic mode."""

    def __init__(self, cfg: RunConfig, out: str | Path, force: bool = False, resume: bool = False):
        self.cfg = cfg.resolved()
        c = self.cfg
        self.out = Path(out)
        self.metrics_path = self.out / "metrics.csv"
        self.ckpt_path = self.out / "checkpoints" / CHECKPOINT_NAME
        if self.metrics_path.exists() and not (force or resume):
            raise OutputExistsError(f"{self.metrics_path} exists; pass --force to overwrite or --resume to continue")
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "checkpoints").mkdir(exist_ok=True)
        save_config(c, self.out / "config.json")

        if c.deterministic:
            set_determinism(c.seed)
        else:
            torch.manual_seed(c.seed)
        cap = thread_cap()
        if cap is not None:
            torch.set_num_threads(cap)
        n_envs = c.train.n_envs if cap is None else min(c.train.n_envs, cap)

        self.map = resolve_map(c.map)
        self.grid = bake_occupancy(self.map, c.cell_size)
        ss = np.random.SeedSequence(c.seed)
        env_ss, replay_ss, warm_ss, her_ss, noise_ss = ss.spawn(5)
        self.envs = [NavEnv(self.map, self.grid, c.sim, c.obs, seed=s) for s in env_ss.spawn(n_envs)]
        self.replay_rng = np.random.default_rng(replay_ss)
        self.warm_rng = np.random.default_rng(warm_ss)
        self.her_rng = np.random.default_rng(her_ss)
        self.gen = torch.Generator().manual_seed(int(noise_ss.generate_state(1)[0]))
        self.agent = SacAgent(c.net, c.sac)
        self.replay = ReplayBuffer(c.sac.replay_capacity)
        cc = c.curriculum
        self.cur = CurriculumState(cc.start_radius, cc.radius_step, cc.radius_max, cc.window, cc.threshold)
        self.env_steps = 0
        self.updates = 0
        self.outcomes: deque[bool] = deque(maxlen=c.train.return_window)
        self.returns: deque[float] = deque(maxlen=c.train.return_window)
        self.final_window: deque[bool] = deque(maxlen=c.curriculum.window)
        self.last_eval = None
        self.steps_to_target: int | None = None
        self.eval_success: float | None = None
        self.last_diag: dict = {}
        if resume and self.ckpt_path.exists():
            self._restore()
        elif force or not self.metrics_path.exists():
            with open(self.metrics_path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_HEADER)

    # ------------------------------------------------------------ checkpoints

    def checkpoint(self) -> None:
        a = self.agent
        meta = {
            "env_steps": self.env_steps,
            "updates": self.updates,
            "curriculum": {"radius": self.cur.radius, "window": list(self.cur.window)},
            "opt_steps": {"critic": a.critic_opt.state.step, "policy": a.policy_opt.state.step, "alpha": a.alpha_opt.state.step},
            "config": to_dict(self.cfg),
        }
        save_checkpoint(self.ckpt_path, self.cfg.net, a.state_tensors(), meta)

    def _restore(self) -> None:
        spec, tensors, meta = load_checkpoint(self.ckpt_path)
        if spec != self.cfg.net:
            raise ValueError(f"checkpoint network spec differs from the config: {spec} vs {self.cfg.net}")
        self.agent.load_state_tensors(tensors, meta.get("opt_steps"))
        self.env_steps = int(meta["env_steps"])
        self.updates = self.agent.updates = int(meta["updates"])
        cm = meta["curriculum"]
        self.cur = CurriculumState(cm["radius"], self.cur.radius_step, self.cur.radius_max, self.cur.window_size, self.cur.threshold, tuple(cm["window"]))
        # drop metrics rows written after the checkpoint
        rows = []
        if self.metrics_path.exists():
            with open(self.metrics_path, newline="") as fh:
                rows = [r for r in csv.reader(fh)][1:]
        with open(self.metrics_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRICS_HEADER)
            w.writerows(r for r in rows if r and int(r[0]) <= self.env_steps)

    # ------------------------------------------------------------ loop

    def _log(self) -> None:
        d = self.last_diag
        sr = sum(self.outcomes) / len(self.outcomes) if self.outcomes else 0.0
        mr = float(np.mean(self.returns)) if self.returns else 0.0
        row = [self.env_steps, self.updates, float(self.cur.radius), sr, mr,
               d.get("critic_loss"), d.get("policy_loss"), d.get("alpha", self.agent.alpha), d.get("mean_q")]
        with open(self.metrics_path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(v) for v in row])

    def _finish_episode(self, i: int, builder: EpisodeBuilder) -> None:
        env = self.envs[i]
        success = env.episode.done == "success"
        ep = builder.build()
        self.replay.add(ep)
        if self.cfg.sac.her and len(ep.positions) >= 2:
            for h in relabel_her(ep, self.cfg.sac.her_strategy, self.her_rng, self.map, self.cfg.sim, self.cfg.sac.her_k):
                self.replay.add(h)
        if builder.radius >= self.cur.radius_max:
            self.final_window.append(success)
        self.cur = update_curriculum(self.cur, success)
        self.outcomes.append(success)
        self.returns.append(env.ep_return)

    def _maybe_update(self) -> None:
        c = self.cfg
        if self.env_steps < c.train.warmup_steps or len(self.replay) == 0:
            return
        k = c.sac.train_ratio
        if c.sac.ratio_mode == "env_per_update":
            n = 1 if self.env_steps % k == 0 else 0
        else:
            n = k
        for _ in range(n):
            batch = sample_batch(self.replay, c.sac.batch_size, c.sac.burn_in, c.sac.train_len, self.replay_rng)
            self.last_diag = update(self.agent, batch, generator=self.gen)
            self.updates += 1

    def _maybe_evaluate(self) -> bool:
        c = self.cfg
        t = c.train
        if len(self.final_window) < self.final_window.maxlen:
            return False
        if sum(self.final_window) / len(self.final_window) < t.target_success:
            return False
        if self.last_eval is not None and self.env_steps - self.last_eval < t.eval_every:
            return False
        self.last_eval = self.env_steps
        res = evaluate(self.agent.net, self.map, self.grid, c.sim, c.obs, c.curriculum.radius_max, t.eval_episodes, c.seed + 10_000)
        self.agent.net.train()
        rate = sum(r.success for r in res) / max(len(res), 1)
        self.eval_success = rate
        if rate >= t.target_success:
            self.steps_to_target = self.env_steps
            return True
        return False

    def run(self) -> TrainResult:
        c = self.cfg
        budget = c.budget
        obs = [e.reset(self.cur) for e in self.envs]
        builders = [EpisodeBuilder(o, e.agent.position, e.agent.yaw, e.episode.goal, self.cur.radius, c.seed, c.obs.use_abs_positions)
                    for o, e in zip(obs, self.envs)]
        hidden = None
        stop = False
        while self.env_steps < budget and not stop:
            acts, hidden, _ = select_action(self.agent.net, _obs_batch(obs), hidden, mode="sample", generator=self.gen)
            if self.env_steps < c.train.warmup_steps:
                acts = self.warm_rng.uniform(-1.0, 1.0, size=acts.shape)
            ended = []
            for i, env in enumerate(self.envs):
                if self.env_steps >= budget:
                    break
                o, r, done = env.step(Action.from_array(acts[i]))
                builders[i].add(acts[i], r, env.episode.done == "success", o, env.agent.position, env.agent.yaw)
                self.env_steps += 1
                if done:
                    self._finish_episode(i, builders[i])
                    o = env.reset(self.cur)
                    builders[i] = EpisodeBuilder(o, env.agent.position, env.agent.yaw, env.episode.goal, self.cur.radius, c.seed, c.obs.use_abs_positions)
                    ended.append(i)
                obs[i] = o
                self._maybe_update()
                if self.env_steps % c.train.log_every == 0:
                    self._log()
                if self.env_steps % c.train.checkpoint_every == 0:
                    self.checkpoint()
                if done and self._maybe_evaluate():
                    stop = True
                    break
            hidden = _hidden_rows(hidden, ended)
        if self.env_steps % c.train.log_every != 0:
            self._log()
        self.checkpoint()
        result = TrainResult(self.env_steps, self.updates, self.cur.radius, self.steps_to_target, self.eval_success, self.out)
        summary = {
            "env_steps": self.env_steps,
            "updates": self.updates,
            "radius": self.cur.radius,
            "steps_to_target": self.steps_to_target,
            "eval_success": self.eval_success,
            "seed": c.seed,
            "ablations": c.ablations.active(),
        }
        (self.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return result


def train(cfg: RunConfig, out: str | Path | None = None, force: bool = False, resume: bool = False) -> TrainResult:
    return Trainer(cfg, out if out is not None else cfg.out, force=force, resume=resume).run()
