"""Recurrent soft actor-critic: sequence replay with burn-in, twin critics, learned temperature."""
from __future__ import annotations

import copy
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .nn import Adam, HiddenState, NavNet, NetworkSpec
from .obs import N_ABS, N_SCALARS, ObsConfig, Observation, abs_position_features, relative_goal_features
from .sim import SimConfig, compute_reward
from .world import MapDef

LOG2 = math.log(2.0)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite {term}: {value}")
        self.term = term


class EmptyBufferError(RuntimeError):
    pass


@dataclass(frozen=True)
class SacConfig:
    lr: float = 3e-4
    gamma: float = 0.99
    tau: float = 0.005
    init_alpha: float = 0.05
    target_entropy: float | None = None  # None -> -action_dim
    learn_alpha: bool = True
    batch_size: int = 16
    burn_in: int = 8
    train_len: int = 24
    replay_capacity: int = 200_000
    # one gradient update per `train_ratio` env steps, or the inverse
    train_ratio: int = 4
    ratio_mode: str = "env_per_update"  # env_per_update | updates_per_env
    her: bool = False
    her_strategy: str = "future"  # final | future
    her_k: int = 1

    def __post_init__(self):
        if self.ratio_mode not in ("env_per_update", "updates_per_env"):
            raise ValueError(f"unknown ratio_mode {self.ratio_mode!r}")
        if self.her_strategy not in ("final", "future"):
            raise ValueError(f"unknown her_strategy {self.her_strategy!r}")
        if self.burn_in < 0 or self.train_len < 1 or self.batch_size < 1:
            raise ValueError("burn_in >= 0, train_len >= 1 and batch_size >= 1 required")


# ---------------------------------------------------------------- episodes and replay


@dataclass(frozen=True)
class TransitionStep:
    obs: Observation
    action: np.ndarray
    reward: float
    done: bool  # terminal (goal reached); timeouts end the episode but still bootstrap


@dataclass(eq=False)
class EpisodeSequence:
    """One episode: T steps and T+1 observations (the last is the final next-observation)."""

    occ_bits: np.ndarray  # (T+1, nbytes) packed occupancy
    depth: np.ndarray  # (T+1, Dh, Dv)
    scalars: np.ndarray  # (T+1, 13)
    abs_positions: np.ndarray  # (T+1, 6)
    actions: np.ndarray  # (T, 4)
    rewards: np.ndarray  # (T,)
    dones: np.ndarray  # (T,)
    positions: np.ndarray  # (T+1, 3) agent feet positions
    yaws: np.ndarray  # (T+1,)
    goal: np.ndarray
    occ_shape: tuple
    radius: float = 0.0
    seed: int = 0
    abs_enabled: bool = True
    relabeled: bool = False

    def __post_init__(self):
        t = len(self.actions)
        if t < 1:
            raise ValueError("episode must have at least one step")
        if self.dones[:-1].any():
            raise ValueError("only the last step of an episode may be terminal")
        for name in ("occ_bits", "depth", "scalars", "abs_positions", "positions", "yaws"):
            if len(getattr(self, name)) != t + 1:
                raise ValueError(f"{name} must have T+1 rows")

    def __len__(self) -> int:
        return len(self.actions)

    def occupancy(self, idx) -> np.ndarray:
        n = int(np.prod(self.occ_shape))
        bits = self.occ_bits[idx]
        return np.unpackbits(bits, axis=-1, count=n, bitorder="little").reshape(*bits.shape[:-1], *self.occ_shape)


class EpisodeBuilder:
    def __init__(self, first_obs: Observation, position, yaw: float, goal, radius: float = 0.0, seed: int = 0, abs_enabled: bool = True):
        self.obs = [first_obs]
        self.positions = [np.asarray(position, dtype=np.float64).copy()]
        self.yaws = [float(yaw)]
        self.actions: list[np.ndarray] = []
        self.rewards: list[float] = []
        self.dones: list[bool] = []
        self.goal = np.asarray(goal, dtype=np.float64).copy()
        self.radius, self.seed, self.abs_enabled = radius, seed, abs_enabled

    def add(self, action, reward: float, terminal: bool, next_obs: Observation, position, yaw: float) -> None:
        self.actions.append(np.asarray(action, dtype=np.float32))
        self.rewards.append(float(reward))
        self.dones.append(bool(terminal))
        self.obs.append(next_obs)
        self.positions.append(np.asarray(position, dtype=np.float64).copy())
        self.yaws.append(float(yaw))

    def build(self) -> EpisodeSequence:
        occ = np.stack([o.occupancy for o in self.obs])
        shape = occ.shape[1:]
        bits = np.packbits(occ.reshape(len(occ), -1), axis=1, bitorder="little")
        return EpisodeSequence(
            occ_bits=bits,
            depth=np.stack([o.depth for o in self.obs]).astype(np.float32),
            scalars=np.stack([o.scalars for o in self.obs]).astype(np.float32),
            abs_positions=np.stack([o.abs_positions for o in self.obs]).astype(np.float32),
            actions=np.stack(self.actions).astype(np.float32),
            rewards=np.asarray(self.rewards, dtype=np.float64),
            dones=np.asarray(self.dones, dtype=bool),
            positions=np.stack(self.positions),
            yaws=np.asarray(self.yaws),
            goal=self.goal,
            occ_shape=tuple(shape),
            radius=self.radius,
            seed=self.seed,
            abs_enabled=self.abs_enabled,
        )


class ReplayBuffer:
    """FIFO store of whole episodes bounded by total step count."""

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self.episodes: deque[EpisodeSequence] = deque()
        self.steps = 0
        self._counts: np.ndarray | None = None
        self._window = None

    def add(self, ep: EpisodeSequence) -> None:
        self.episodes.append(ep)
        self.steps += len(ep)
        while self.steps > self.capacity and len(self.episodes) > 1:
            self.steps -= len(self.episodes.popleft())
        self._counts = None

    def __len__(self) -> int:
        return len(self.episodes)

    def window_counts(self, window: int) -> np.ndarray:
        if self._counts is None or self._window != window:
            self._counts = np.array([max(1, len(e) - window + 1) for e in self.episodes], dtype=np.int64)
            self._window = window
        return self._counts


@dataclass(eq=False)
class Batch:
    """Windows of burn_in + train_len steps with one extra trailing observation.

    Observation arrays are (B, W+1, ...); step arrays are (B, W).
    ``obs_mask`` / ``step_mask`` flag real (non-padding) entries.
    """

    occupancy: np.ndarray
    depth: np.ndarray
    scalars: np.ndarray
    abs_positions: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    obs_mask: np.ndarray
    step_mask: np.ndarray
    burn_in: int
    train_len: int
    index: list  # (episode position in buffer, offset) per row

    def obs(self, lo: int, hi: int) -> dict[str, np.ndarray]:
        return {
            "occupancy": self.occupancy[:, lo:hi],
            "depth": self.depth[:, lo:hi],
            "scalars": self.scalars[:, lo:hi],
            "abs_positions": self.abs_positions[:, lo:hi],
        }


def window_from_episode(ep: EpisodeSequence, offset: int, burn_in: int, train_len: int):
    """Slice (or front-pad) one window out of an episode."""
    w = burn_in + train_len
    t = len(ep)
    if t >= w:
        if not 0 <= offset <= t - w:
            raise IndexError(f"offset {offset} outside [0, {t - w}]")
        pad, lo, n = 0, offset, w
    else:
        pad, lo, n = w - t, 0, t
    occ = np.zeros((w + 1, *ep.occ_shape), dtype=np.uint8)
    depth = np.zeros((w + 1, *ep.depth.shape[1:]), dtype=np.float32)
    scal = np.zeros((w + 1, ep.scalars.shape[1]), dtype=np.float32)
    absp = np.zeros((w + 1, ep.abs_positions.shape[1]), dtype=np.float32)
    act = np.zeros((w, ep.actions.shape[1]), dtype=np.float32)
    rew = np.zeros(w, dtype=np.float64)
    done = np.zeros(w, dtype=np.float64)
    omask = np.zeros(w + 1, dtype=bool)
    smask = np.zeros(w, dtype=bool)
    occ[pad:] = ep.occupancy(slice(lo, lo + n + 1))
    depth[pad:] = ep.depth[lo:lo + n + 1]
    scal[pad:] = ep.scalars[lo:lo + n + 1]
    absp[pad:] = ep.abs_positions[lo:lo + n + 1]
    act[pad:] = ep.actions[lo:lo + n]
    rew[pad:] = ep.rewards[lo:lo + n]
    done[pad:] = ep.dones[lo:lo + n]
    omask[pad:] = True
    smask[pad:] = True
    return occ, depth, scal, absp, act, rew, done, omask, smask


def sample_batch(buffer: ReplayBuffer, batch: int, burn_in: int, train_len: int, rng: np.random.Generator) -> Batch:
    """Uniform over valid (episode, offset) pairs; short episodes are front-padded."""
    if len(buffer) == 0:
        raise EmptyBufferError("cannot sample from an empty replay buffer")
    w = burn_in + train_len
    counts = buffer.window_counts(w)
    cum = np.cumsum(counts)
    draws = rng.integers(0, int(cum[-1]), size=batch)
    eps = np.searchsorted(cum, draws, side="right")
    offsets = draws - np.concatenate([[0], cum[:-1]])[eps]
    rows = [window_from_episode(buffer.episodes[e], int(o), burn_in, train_len) for e, o in zip(eps, offsets)]
    cols = list(zip(*rows))
    return Batch(
        *(np.stack(c) for c in cols),
        burn_in=burn_in,
        train_len=train_len,
        index=[(int(e), int(o)) for e, o in zip(eps, offsets)],
    )


# ---------------------------------------------------------------- hindsight relabeling


def relabel_her(
    ep: EpisodeSequence,
    strategy: str,
    rng: np.random.Generator,
    m: MapDef,
    sim_cfg: SimConfig,
    k: int = 1,
) -> list[EpisodeSequence]:
    """Copies of ``ep`` whose goal is a position the agent actually reached.

    ``final`` uses the last position; ``future`` draws an anchor step and a
    goal from strictly later positions. Rewards, terminal flags and the
    goal-dependent observation features are recomputed from step 0, and the
    copy is cut at its first success.
    """
    n_pos = len(ep.positions)
    if n_pos < 2:
        raise ValueError("relabeling needs at least two recorded positions")
    out = []
    for _ in range(k):
        if strategy == "final":
            gi = n_pos - 1
        elif strategy == "future":
            anchor = int(rng.integers(0, n_pos - 1))
            gi = int(rng.integers(anchor + 1, n_pos))
        else:
            raise ValueError(f"unknown strategy {strategy!r}")
        goal = ep.positions[gi].copy()
        dists = np.linalg.norm(ep.positions - goal, axis=1)
        rewards, dones = [], []
        best = dists[0]
        for t in range(1, n_pos):
            rewards.append(compute_reward(float(dists[t]), float(best), sim_cfg.step_penalty, sim_cfg.goal_epsilon))
            best = min(best, dists[t])
            hit = dists[t] <= sim_cfg.goal_epsilon
            dones.append(bool(hit))
            if hit:
                break
        steps = len(rewards)
        scal = ep.scalars[: steps + 1].copy()
        for i in range(steps + 1):
            scal[i, 6:9] = relative_goal_features(ep.positions[i], ep.yaws[i], goal, m)
        if ep.abs_enabled:
            absp = np.stack([abs_position_features(ep.positions[i], goal, m) for i in range(steps + 1)])
        else:
            absp = np.zeros((steps + 1, N_ABS), dtype=np.float32)
        out.append(replace(
            ep,
            occ_bits=ep.occ_bits[: steps + 1],
            depth=ep.depth[: steps + 1],
            scalars=scal,
            abs_positions=absp.astype(np.float32),
            actions=ep.actions[:steps],
            rewards=np.asarray(rewards),
            dones=np.asarray(dones, dtype=bool),
            positions=ep.positions[: steps + 1],
            yaws=ep.yaws[: steps + 1],
            goal=goal,
            relabeled=True,
        ))
    return out


# ---------------------------------------------------------------- policy


def squashed_gaussian(mean: torch.Tensor, log_std: torch.Tensor, noise: torch.Tensor | None):
    """tanh(mean + std * noise) and its log-density (sum over action dims)."""
    std = log_std.exp()
    u = mean if noise is None else mean + std * noise
    a = torch.tanh(u)
    z = (u - mean) / std
    log_n = -0.5 * z * z - log_std - 0.5 * math.log(2 * math.pi)
    # log(1 - tanh(u)^2), stable form
    log_jac = 2.0 * (LOG2 - u - F.softplus(-2.0 * u))
    return a, (log_n - log_jac).sum(-1)


def select_action(
    net: NavNet,
    obs: dict[str, np.ndarray],
    hidden: HiddenState | None,
    mode: str = "sample",
    generator: torch.Generator | None = None,
):
    """Act on a batch of single-step observations (leading dim B).

    Returns ``(actions (B, A) numpy, new hidden, log_prob (B,) numpy)``.
    """
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        xs = [torch.as_tensor(np.asarray(obs[k]), dtype=dtype).unsqueeze(1)
              for k in ("occupancy", "depth", "scalars", "abs_positions")]
        emb, hidden = net(*xs, hidden=hidden)
        mean, log_std = net.policy(emb[:, 0])
        if mode == "mean":
            noise = None
        elif mode == "sample":
            noise = torch.randn(mean.shape, generator=generator, dtype=dtype)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        a, logp = squashed_gaussian(mean, log_std, noise)
    return a.numpy().astype(np.float64), hidden, logp.numpy()


# ---------------------------------------------------------------- learner


class SacAgent:
    def __init__(self, spec: NetworkSpec, cfg: SacConfig, dtype=torch.float32):
        self.spec = spec
        self.cfg = cfg
        self.net = NavNet(spec).to(dtype)
        self.target = copy.deepcopy(self.net)
        for p in self.target.parameters():
            p.requires_grad_(False)
        self.log_alpha = torch.tensor(math.log(cfg.init_alpha), dtype=dtype, requires_grad=True)
        self.target_entropy = float(cfg.target_entropy if cfg.target_entropy is not None else -spec.action_dim)
        self.critic_opt = Adam(self.net.critic_parameters(), lr=cfg.lr)
        self.policy_opt = Adam(self.net.policy_parameters(), lr=cfg.lr)
        self.alpha_opt = Adam([self.log_alpha], lr=cfg.lr)
        self.updates = 0

    @property
    def alpha(self) -> float:
        return float(self.log_alpha.detach().exp())

    @property
    def dtype(self):
        return self.log_alpha.dtype

    def critic_pairs(self):
        online = self.net.critic_parameters()
        target = self.target.critic_parameters()
        return list(zip(target, online))

    def polyak(self, tau: float | None = None) -> None:
        tau = self.cfg.tau if tau is None else tau
        with torch.no_grad():
            for tp, p in self.critic_pairs():
                tp.mul_(1.0 - tau).add_(p, alpha=tau)

    # tensors saved in checkpoints
    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"net/{k}": v for k, v in self.net.state_dict().items()}
        out.update({f"target/{k}": v for k, v in self.target.state_dict().items()})
        out["log_alpha"] = self.log_alpha.detach().reshape(1)
        out.update(self.critic_opt.tensors("opt/critic"))
        out.update(self.policy_opt.tensors("opt/policy"))
        out.update(self.alpha_opt.tensors("opt/alpha"))
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor], opt_steps: dict | None = None) -> None:
        net_sd = {k[4:]: v for k, v in tensors.items() if k.startswith("net/")}
        self.net.load_state_dict({k: v.to(self.dtype) for k, v in net_sd.items()})
        tgt = {k[7:]: v for k, v in tensors.items() if k.startswith("target/")}
        self.target.load_state_dict({k: v.to(self.dtype) for k, v in (tgt or net_sd).items()})
        if "log_alpha" in tensors:
            with torch.no_grad():
                self.log_alpha.copy_(tensors["log_alpha"].reshape(()).to(self.dtype))
        steps = opt_steps or {}
        self.critic_opt.load_tensors("opt/critic", tensors, steps.get("critic", 0))
        self.policy_opt.load_tensors("opt/policy", tensors, steps.get("policy", 0))
        self.alpha_opt.load_tensors("opt/alpha", tensors, steps.get("alpha", 0))


def _t(x, dtype):
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def burn_in_hidden(net: NavNet, batch: Batch) -> HiddenState | None:
    """Hidden state at the start of the training slice, unrolled without gradients from zero."""
    if net.lstm is None:
        return None
    dtype = next(net.parameters()).dtype
    b = batch.actions.shape[0]
    if batch.burn_in == 0:
        return HiddenState.zeros(b, net.spec.lstm_hidden, dtype=dtype)
    obs = batch.obs(0, batch.burn_in)
    with torch.no_grad():
        xs = [_t(obs[k], dtype) for k in ("occupancy", "depth", "scalars", "abs_positions")]
        _, h = net(*xs, mask=_t(batch.obs_mask[:, : batch.burn_in], dtype))
    return h


def _masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return (x * mask).sum() / mask.sum().clamp(min=1.0)


def sac_losses(agent: SacAgent, batch: Batch, noise_next: torch.Tensor | None = None, noise_pi: torch.Tensor | None = None,
               generator: torch.Generator | None = None) -> dict[str, torch.Tensor]:
    """Critic, policy and temperature losses on the training slice of ``batch``.

    Noise tensors (B, train_len, A) may be supplied for reproducible checks.
    """
    cfg, net, target = agent.cfg, agent.net, agent.target
    dtype = agent.dtype
    bi, L = batch.burn_in, batch.train_len
    h_on = burn_in_hidden(net, batch)
    h_tg = burn_in_hidden(target, batch)
    obs = batch.obs(bi, bi + L + 1)
    xs = [_t(obs[k], dtype) for k in ("occupancy", "depth", "scalars", "abs_positions")]
    omask = _t(batch.obs_mask[:, bi:], dtype)
    emb, _ = net(*xs, hidden=h_on, mask=omask if net.lstm is not None else None)
    with torch.no_grad():
        emb_t, _ = target(*xs, hidden=h_tg, mask=omask if target.lstm is not None else None)

    acts = _t(batch.actions[:, bi:], dtype)
    rew = _t(batch.rewards[:, bi:], dtype)
    done = _t(batch.dones[:, bi:], dtype)
    smask = _t(batch.step_mask[:, bi:], dtype)
    shape = (acts.shape[0], L, agent.spec.action_dim)
    if noise_next is None:
        noise_next = torch.randn(shape, generator=generator, dtype=dtype)
    if noise_pi is None:
        noise_pi = torch.randn(shape, generator=generator, dtype=dtype)
    alpha = agent.log_alpha.exp().detach()

    with torch.no_grad():
        mean_n, log_std_n = net.policy(emb[:, 1:].detach())
        a_next, logp_next = squashed_gaussian(mean_n, log_std_n, noise_next)
        tq1, tq2 = target.q(emb_t[:, 1:], a_next)
        y = rew + cfg.gamma * (1.0 - done) * (torch.min(tq1, tq2) - alpha * logp_next)
    q1, q2 = net.q(emb[:, :-1], acts)
    critic_loss = _masked_mean((q1 - y) ** 2, smask)
    if net.q2 is not None:
        critic_loss = critic_loss + _masked_mean((q2 - y) ** 2, smask)

    e = emb[:, :-1].detach()
    mean, log_std = net.policy(e)
    a_pi, logp = squashed_gaussian(mean, log_std, noise_pi)
    p1, p2 = net.q(e, a_pi)
    policy_loss = _masked_mean(alpha * logp - torch.min(p1, p2), smask)
    alpha_loss = _masked_mean(-agent.log_alpha * (logp.detach() + agent.target_entropy), smask)
    return {
        "critic_loss": critic_loss,
        "policy_loss": policy_loss,
        "alpha_loss": alpha_loss,
        "mean_q": _masked_mean(q1.detach(), smask),
        "target": y,
        "logp": logp.detach(),
    }


def update(agent: SacAgent, batch: Batch, generator: torch.Generator | None = None, **noise) -> dict[str, float]:
    """One gradient step on critics, policy and temperature, then Polyak-average the targets."""
    losses = sac_losses(agent, batch, generator=generator, **noise)
    for term in ("critic_loss", "policy_loss", "alpha_loss"):
        v = float(losses[term].detach())
        if not math.isfinite(v):
            raise NonFiniteLossError(term, v)
    net = agent.net
    critic_params = net.critic_parameters()
    policy_params = net.policy_parameters()
    g_critic = torch.autograd.grad(losses["critic_loss"], critic_params, retain_graph=True, allow_unused=True)
    g_policy = torch.autograd.grad(losses["policy_loss"], policy_params, allow_unused=True)
    for p, g in zip(critic_params, g_critic):
        p.grad = g
    agent.critic_opt.step()
    for p, g in zip(policy_params, g_policy):
        p.grad = g
    agent.policy_opt.step()
    if agent.cfg.learn_alpha:
        (g_alpha,) = torch.autograd.grad(losses["alpha_loss"], [agent.log_alpha])
        agent.log_alpha.grad = g_alpha
        agent.alpha_opt.step()
    for p in critic_params + policy_params:
        p.grad = None
    agent.log_alpha.grad = None
    agent.polyak()
    agent.updates += 1
    return {
        "critic_loss": float(losses["critic_loss"].detach()),
        "policy_loss": float(losses["policy_loss"].detach()),
        "alpha_loss": float(losses["alpha_loss"].detach()),
        "alpha": agent.alpha,
        "mean_q": float(losses["mean_q"]),
    }
