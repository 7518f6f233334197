"""Network stack for the navigation agent.

Layers and reverse-mode differentiation come from torch; this module owns
the architecture description (NetworkSpec), shape validation, weight init,
the Adam update, the functional forward/backward surface used for gradient
verification, and the checkpoint format.

Architecture: occupancy -> 3D convs, depth -> 2D convs, absolute positions
-> linear; concatenated with the scalar features, then a ReLU MLP trunk and
an LSTM whose output is the embedding shared by the policy and twin Q heads.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

CKPT_MAGIC = b"NAVK"
CKPT_VERSION = 1
LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0


class ShapeError(ValueError):
    pass


class MissingCacheError(RuntimeError):
    pass


def conv_out(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv3d | conv2d | linear | lstm | relu | flatten | concat
    in_shape: tuple
    out_shape: tuple


@dataclass(frozen=True)
class NetworkSpec:
    occ_shape: tuple[int, int, int] = (16, 8, 16)
    depth_shape: tuple[int, int] = (12, 4)
    n_scalars: int = 13
    n_abs: int = 6
    action_dim: int = 4
    conv3d_channels: tuple[int, ...] = (8, 16)
    conv2d_channels: tuple[int, ...] = (8, 16)
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    abs_width: int = 32
    trunk_widths: tuple[int, ...] = (128, 128)
    lstm_hidden: int = 128  # 0 removes the LSTM
    head_width: int = 128
    twin_q: bool = True

    def __post_init__(self):
        for name in ("occ_shape", "depth_shape", "conv3d_channels", "conv2d_channels", "trunk_widths"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.layers()

    @property
    def embedding_dim(self) -> int:
        return self.lstm_hidden if self.lstm_hidden else self.trunk_widths[-1]

    def layers(self) -> list[LayerSpec]:
        """Ordered layer descriptors with shapes; raises ShapeError when they do not compose."""
        out: list[LayerSpec] = []

        def check(shape, i_name):
            if any(d < 1 for d in shape):
                raise ShapeError(f"layer {len(out)} ({i_name}): non-positive output shape {shape}")

        shape = (1, *self.occ_shape)
        for i, ch in enumerate(self.conv3d_channels):
            nxt = (ch, *(conv_out(d, self.kernel, self.stride, self.padding) for d in shape[1:]))
            check(nxt, f"occ.conv3d{i}")
            out.append(LayerSpec(f"occ.conv3d{i}", "conv3d", shape, nxt))
            out.append(LayerSpec(f"occ.relu{i}", "relu", nxt, nxt))
            shape = nxt
        occ_flat = int(np.prod(shape))
        shape = (1, *self.depth_shape)
        for i, ch in enumerate(self.conv2d_channels):
            nxt = (ch, *(conv_out(d, self.kernel, self.stride, self.padding) for d in shape[1:]))
            check(nxt, f"depth.conv2d{i}")
            out.append(LayerSpec(f"depth.conv2d{i}", "conv2d", shape, nxt))
            out.append(LayerSpec(f"depth.relu{i}", "relu", nxt, nxt))
            shape = nxt
        depth_flat = int(np.prod(shape))
        check((self.n_abs, self.abs_width), "abs.linear")
        out.append(LayerSpec("abs.linear", "linear", (self.n_abs,), (self.abs_width,)))
        width = occ_flat + depth_flat + self.abs_width + self.n_scalars
        out.append(LayerSpec("concat", "concat", (occ_flat, depth_flat, self.abs_width, self.n_scalars), (width,)))
        if not self.trunk_widths:
            raise ShapeError("trunk needs at least one linear layer")
        for i, w in enumerate(self.trunk_widths):
            check((w,), f"trunk.linear{i}")
            out.append(LayerSpec(f"trunk.linear{i}", "linear", (width,), (w,)))
            out.append(LayerSpec(f"trunk.relu{i}", "relu", (w,), (w,)))
            width = w
        if self.lstm_hidden < 0:
            raise ShapeError("lstm_hidden must be >= 0")
        if self.lstm_hidden:
            out.append(LayerSpec("lstm", "lstm", (width,), (self.lstm_hidden,)))
            width = self.lstm_hidden
        check((self.head_width, self.action_dim), "heads")
        out.append(LayerSpec("policy", "linear", (width,), (2 * self.action_dim,)))
        out.append(LayerSpec("q", "linear", (width + self.action_dim,), (1,)))
        return out

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


class HiddenState(NamedTuple):
    h: torch.Tensor  # (B, H)
    c: torch.Tensor  # (B, H)

    @classmethod
    def zeros(cls, batch: int, size: int, dtype=torch.float32) -> "HiddenState":
        return cls(torch.zeros(batch, size, dtype=dtype), torch.zeros(batch, size, dtype=dtype))

    def detach(self) -> "HiddenState":
        return HiddenState(self.h.detach(), self.c.detach())


def _mlp(sizes: Sequence[int], final_act: bool) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if final_act or i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def init_weights(module: nn.Module) -> None:
    """Orthogonal linear/LSTM weights, Kaiming-uniform convs, zero biases."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.orthogonal_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.Conv2d, nn.Conv3d)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LSTM):
            for name, p in m.named_parameters():
                if name.startswith("weight"):
                    for chunk in p.data.chunk(4, 0):
                        nn.init.orthogonal_(chunk)
                else:
                    nn.init.zeros_(p)


class NavNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        k, s, p = spec.kernel, spec.stride, spec.padding
        convs: list[nn.Module] = []
        cin = 1
        for ch in spec.conv3d_channels:
            convs += [nn.Conv3d(cin, ch, k, s, p), nn.ReLU()]
            cin = ch
        self.occ_enc = nn.Sequential(*convs, nn.Flatten())
        convs = []
        cin = 1
        for ch in spec.conv2d_channels:
            convs += [nn.Conv2d(cin, ch, k, s, p), nn.ReLU()]
            cin = ch
        self.depth_enc = nn.Sequential(*convs, nn.Flatten())
        self.abs_enc = nn.Sequential(nn.Linear(spec.n_abs, spec.abs_width), nn.ReLU())
        self._layer_specs = spec.layers()
        concat = next(l for l in self._layer_specs if l.kind == "concat").out_shape[0]
        self.trunk = _mlp([concat, *spec.trunk_widths], final_act=True)
        self.lstm = nn.LSTM(spec.trunk_widths[-1], spec.lstm_hidden, batch_first=True) if spec.lstm_hidden else None
        emb, a = spec.embedding_dim, spec.action_dim
        self.policy_head = _mlp([emb, spec.head_width, 2 * a], final_act=False)
        self.q1 = _mlp([emb + a, spec.head_width, 1], final_act=False)
        self.q2 = _mlp([emb + a, spec.head_width, 1], final_act=False) if spec.twin_q else None
        init_weights(self)

    # parameter groups: the shared encoder is trained by the critic loss only
    def shared_parameters(self) -> list[nn.Parameter]:
        mods = [self.occ_enc, self.depth_enc, self.abs_enc, self.trunk] + ([self.lstm] if self.lstm else [])
        return [p for m in mods for p in m.parameters()]

    def critic_parameters(self) -> list[nn.Parameter]:
        heads = [self.q1] + ([self.q2] if self.q2 is not None else [])
        return self.shared_parameters() + [p for h in heads for p in h.parameters()]

    def policy_parameters(self) -> list[nn.Parameter]:
        return list(self.policy_head.parameters())

    def _check_inputs(self, occ, depth, scalars, absp) -> None:
        layers = self._layer_specs
        first = lambda prefix: next(i for i, l in enumerate(layers) if l.name.startswith(prefix))
        concat = first("concat")
        checks = [
            (occ, 2, tuple(self.spec.occ_shape), first("occ") if self.spec.conv3d_channels else concat),
            (depth, 2, tuple(self.spec.depth_shape), first("depth") if self.spec.conv2d_channels else concat),
            (scalars, 2, (self.spec.n_scalars,), concat),
            (absp, 2, (self.spec.n_abs,), first("abs")),
        ]
        lead = tuple(scalars.shape[:2])
        for x, k, want, idx in checks:
            if x.dim() != k + len(want) or tuple(x.shape[:k]) != lead or tuple(x.shape[k:]) != want:
                raise ShapeError(
                    f"layer {idx} ({layers[idx].name}): expected input (B, T, {', '.join(map(str, want))}), got {tuple(x.shape)}"
                )

    def features(self, occ, depth, scalars, absp) -> torch.Tensor:
        """Per-step trunk features; inputs carry leading dims (B, T)."""
        self._check_inputs(occ, depth, scalars, absp)
        b, t = scalars.shape[:2]
        dtype = self.trunk[0].weight.dtype
        o = self.occ_enc(occ.reshape(b * t, 1, *occ.shape[2:]).to(dtype))
        d = self.depth_enc(depth.reshape(b * t, 1, *depth.shape[2:]).to(dtype))
        a = self.abs_enc(absp.reshape(b * t, -1).to(dtype))
        x = torch.cat([o, d, a, scalars.reshape(b * t, -1).to(dtype)], dim=1)
        return self.trunk(x).reshape(b, t, -1)

    def forward(self, occ, depth, scalars, absp, hidden: HiddenState | None = None, mask: torch.Tensor | None = None):
        """Embeddings (B, T, E) and the hidden state after the last step.

        ``mask`` (B, T) marks valid steps; the hidden state is held at zero
        through invalid (front-padding) steps.
        """
        x = self.features(occ, depth, scalars, absp)
        if self.lstm is None:
            return x, hidden
        b = x.shape[0]
        if hidden is None:
            hidden = HiddenState.zeros(b, self.spec.lstm_hidden, dtype=x.dtype)
        if mask is None:
            y, (h, c) = self.lstm(x, (hidden.h.unsqueeze(0), hidden.c.unsqueeze(0)))
            return y, HiddenState(h[0], c[0])
        m = mask.to(x.dtype)
        if bool((m[:, 1:] >= m[:, :-1]).all()):
            return self._suffix_masked(x, hidden, m)
        h, c = hidden.h, hidden.c
        outs = []
        for t in range(x.shape[1]):
            y, (h1, c1) = self.lstm(x[:, t:t + 1], (h.unsqueeze(0), c.unsqueeze(0)))
            keep = m[:, t:t + 1]
            h, c = h1[0] * keep, c1[0] * keep
            outs.append(y[:, 0] * keep)
        return torch.stack(outs, dim=1), HiddenState(h, c)

    def _suffix_masked(self, x, hidden: HiddenState, m: torch.Tensor):
        # valid steps form a suffix: shift them to the front and run one packed pass
        b, t = m.shape
        lengths = m.sum(1).long()
        pad = t - lengths
        idx = (torch.arange(t).unsqueeze(0) + pad.unsqueeze(1)).clamp(max=t - 1)
        xs = torch.gather(x, 1, idx.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
        # a row with padding enters its first valid step from zero
        keep0 = (pad == 0).to(x.dtype).unsqueeze(1)
        h0, c0 = hidden.h * keep0, hidden.c * keep0
        packed = nn.utils.rnn.pack_padded_sequence(xs, lengths.clamp(min=1).cpu(), batch_first=True, enforce_sorted=False)
        y, (h, c) = self.lstm(packed, (h0.unsqueeze(0), c0.unsqueeze(0)))
        y, _ = nn.utils.rnn.pad_packed_sequence(y, batch_first=True, total_length=t)
        back = (torch.arange(t).unsqueeze(0) - pad.unsqueeze(1)).clamp(min=0)
        y = torch.gather(y, 1, back.unsqueeze(-1).expand(-1, -1, y.shape[-1])) * m.unsqueeze(-1)
        alive = (lengths > 0).to(x.dtype).unsqueeze(1)
        return y, HiddenState(h[0] * alive, c[0] * alive)

    def policy(self, emb: torch.Tensor):
        out = self.policy_head(emb)
        mean, log_std = out.chunk(2, dim=-1)
        return mean, log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)

    def q(self, emb: torch.Tensor, action: torch.Tensor):
        x = torch.cat([emb, action.to(emb.dtype)], dim=-1)
        q1 = self.q1(x).squeeze(-1)
        q2 = self.q2(x).squeeze(-1) if self.q2 is not None else q1
        return q1, q2


def obs_tensors(batch: dict[str, np.ndarray], dtype=torch.float32):
    """numpy observation stacks (B, T, ...) -> tensors in network input order."""
    return tuple(
        torch.as_tensor(np.asarray(batch[k]), dtype=dtype)
        for k in ("occupancy", "depth", "scalars", "abs_positions")
    )


# ---------------------------------------------------------------- functional surface


@dataclass
class ForwardCache:
    inputs: tuple
    params: list
    names: list
    outputs: tuple
    consumed: bool = False


def forward(module: nn.Module, *inputs, hidden=None, **kwargs):
    """Run ``module`` keeping what ``backward`` needs.

    Returns ``(outputs, new_hidden, cache)``; ``new_hidden`` is None for
    modules without recurrent state.
    """
    xs = tuple(x.detach().clone().requires_grad_(x.is_floating_point()) for x in inputs)
    with torch.enable_grad():
        if hidden is not None:
            res = module(*xs, hidden, **kwargs)
        else:
            res = module(*xs, **kwargs)
    new_hidden = None
    if isinstance(module, nn.LSTM):
        outputs, (h, c) = res
        new_hidden = HiddenState(h[0], c[0])
        outputs = (outputs,)
    elif isinstance(module, NavNet):
        emb, new_hidden = res
        outputs = (emb,)
    else:
        outputs = res if isinstance(res, tuple) else (res,)
    names, params = zip(*module.named_parameters()) if any(True for _ in module.parameters()) else ((), ())
    return outputs, new_hidden, ForwardCache(xs, list(params), list(names), outputs)


def backward(cache: ForwardCache | None, grad_outputs):
    """Reverse-mode gradients of ``sum(grad_outputs * outputs)``.

    Returns ``(param_grads, input_grads)``: a name -> tensor dict and a tuple
    aligned with the forward inputs (None for non-float inputs).
    """
    if cache is None or cache.consumed:
        raise MissingCacheError("backward() needs a fresh forward cache")
    if isinstance(grad_outputs, torch.Tensor):
        grad_outputs = (grad_outputs,)
    cache.consumed = True
    wrt = list(cache.params) + [x for x in cache.inputs if x.requires_grad]
    grads = torch.autograd.grad(cache.outputs, wrt, grad_outputs, allow_unused=True)
    n = len(cache.params)
    param_grads = {
        name: (g if g is not None else torch.zeros_like(p))
        for name, p, g in zip(cache.names, cache.params, grads[:n])
    }
    it = iter(grads[n:])
    input_grads = tuple(next(it) if x.requires_grad else None for x in cache.inputs)
    return param_grads, input_grads


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None], state: AdamState) -> None:
    """In-place bias-corrected Adam update of ``params``; advances ``state``."""
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("Adam state does not match the parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))


class Adam:
    """Adam over a fixed parameter list, reading ``.grad``."""

    def __init__(self, params: Sequence[torch.Tensor], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr, betas[0], betas[1], eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def tensors(self, prefix: str) -> dict[str, torch.Tensor]:
        out = {f"{prefix}/m{i}": t for i, t in enumerate(self.state.m)}
        out.update({f"{prefix}/v{i}": t for i, t in enumerate(self.state.v)})
        return out

    def load_tensors(self, prefix: str, tensors: dict[str, torch.Tensor], step: int) -> None:
        n = len(self.params)
        if f"{prefix}/m0" not in tensors:
            return
        self.state.m = [tensors[f"{prefix}/m{i}"].clone().to(self.params[i].dtype) for i in range(n)]
        self.state.v = [tensors[f"{prefix}/v{i}"].clone().to(self.params[i].dtype) for i in range(n)]
        self.state.step = step


# ---------------------------------------------------------------- checkpoints

_CKPT_PREFIX = struct.Struct("<4sII")


def save_checkpoint(path: str | Path, spec: NetworkSpec, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    """Versioned binary: magic, version, header length, JSON header, little-endian f32 blobs."""
    names = list(tensors)
    header = {
        "spec": spec.to_dict(),
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    blobs = [tensors[n].detach().cpu().numpy().astype("<f4").tobytes() for n in names]
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_checkpoint(path: str | Path):
    """Returns ``(spec, tensors, meta)``."""
    data = Path(path).read_bytes()
    magic, version, hlen = _CKPT_PREFIX.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = _CKPT_PREFIX.size
    header = json.loads(data[off:off + hlen])
    off += hlen
    tensors = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(t["shape"]).copy()
        off += 4 * n
        tensors[t["name"]] = torch.from_numpy(arr)
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after tensor payload")
    return NetworkSpec.from_dict(header["spec"]), tensors, header["meta"]


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
