"""Diffusion-transformer action head with perturbable self-attention.

Every self-attention layer takes an :class:`AttentionMode`. ``NORMAL`` is
standard softmax attention; ``IDENTITY`` swaps the attention map for the
identity so each action token only sees its own value vector. The two
feature modes perturb the value tokens before normal attention and back the
white-noise-guidance and feature-smoothing baselines.

All math runs in float64. Inputs carry an optional leading batch dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DTYPE = torch.float64
NULL_INSTRUCTION = -1


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# attention modes


_MODE_KINDS = ("normal", "identity", "noise", "smooth")


@dataclass(frozen=True)
class AttentionMode:
    kind: str = "normal"
    sigma: Optional[float] = None

    def __post_init__(self):
        if self.kind not in _MODE_KINDS:
            raise ValueError(f"unknown attention mode {self.kind!r}")
        needs_sigma = self.kind in ("noise", "smooth")
        if needs_sigma != (self.sigma is not None):
            raise ValueError(f"mode {self.kind!r}: sigma given iff noise/smooth")
        if needs_sigma and not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be finite and >= 0, got {self.sigma}")

    def __str__(self):
        return self.kind if self.sigma is None else f"{self.kind}({self.sigma:g})"


NORMAL = AttentionMode("normal")
IDENTITY = AttentionMode("identity")


def feature_noise(sigma: float) -> AttentionMode:
    return AttentionMode("noise", float(sigma))


def feature_smooth(sigma: float) -> AttentionMode:
    return AttentionMode("smooth", float(sigma))


PerturbationConfig = Mapping[int, AttentionMode]


def identity_perturbation(layers) -> dict[int, AttentionMode]:
    return {int(i): IDENTITY for i in layers}


# ---------------------------------------------------------------------------
# gaussian filtering shared by feature smoothing and action smoothing


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized Gaussian taps truncated at +-ceil(4 sigma); ``[1.0]`` for sigma 0."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return np.ones(1)
    radius = int(math.ceil(4.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (offsets / sigma) ** 2)
    return taps / taps.sum()


def smooth_tokens(x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Convolve along dim -2 with an edge-replicated Gaussian kernel."""
    taps = gaussian_kernel(sigma)
    if len(taps) == 1:
        return x
    radius = len(taps) // 2
    T = x.shape[-2]
    idx = torch.arange(-radius, T + radius).clamp(0, T - 1)
    padded = x.index_select(-2, idx)
    # accumulate weighted differences from the centre so constant rows come back exactly
    out = x
    for j, w in enumerate(taps):
        if j != radius:
            out = out + float(w) * (padded[..., j : j + T, :] - x)
    return out


# ---------------------------------------------------------------------------
# attention


def attention_map(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    # explicit softmax: the float64 library kernel is several times slower on CPU
    e = torch.exp(scores - scores.amax(dim=-1, keepdim=True))
    return e / e.sum(dim=-1, keepdim=True)


def _attend(q, k, v, mode: AttentionMode, rng: Optional[np.random.Generator]):
    if mode.kind == "identity":
        return v
    if mode.kind == "noise" and mode.sigma > 0:
        if rng is None:
            raise ValueError("feature-noise attention needs a random stream")
        eta = torch.from_numpy(rng.standard_normal(tuple(v.shape)))
        v = v + mode.sigma * eta
    elif mode.kind == "smooth":
        v = smooth_tokens(v, mode.sigma)
    return attention_map(q, k) @ v


def softmax_attention(q, k, v, mode: AttentionMode = NORMAL, rng=None) -> torch.Tensor:
    """Single-head attention over the token axis (dim -2) with a perturbation mode.

    ``IDENTITY`` returns ``v`` itself. ``noise`` mode draws its Gaussian
    perturbation from ``rng``; sigma 0 draws nothing.
    """
    q, k, v = (torch.as_tensor(t, dtype=DTYPE) for t in (q, k, v))
    if not (q.shape == k.shape == v.shape) or q.ndim < 2 or q.shape[-1] < 1:
        raise ShapeError(f"q/k/v shapes differ or are degenerate: {q.shape}, {k.shape}, {v.shape}")
    for t in (q, k, v):
        if not torch.isfinite(t).all():
            raise NonFiniteError("non-finite attention input")
    return _attend(q, k, v, mode, rng)


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class NetConfig:
    action_dim: int
    obs_dim: int
    vocab: int
    num_layers: int = 8
    hidden: int = 64
    heads: int = 4
    chunk: int = 16
    mlp_ratio: int = 2
    freq_dim: int = 32

    def __post_init__(self):
        for name in ("action_dim", "obs_dim", "vocab", "num_layers", "hidden", "heads", "chunk"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden % self.heads:
            raise ValueError("hidden width must be divisible by head count")
        if self.freq_dim % 2:
            raise ValueError("freq_dim must be even")


@dataclass
class ConditionInput:
    """Observation, instruction id and flow time; leading batch dim optional.

    ``instruction`` may be ``None`` or :data:`NULL_INSTRUCTION` for the null
    instruction. ``tau`` may be a scalar shared by the batch.
    """

    observation: object
    instruction: object
    tau: object = 0.0

    def tensors(self, vocab: int):
        obs = torch.as_tensor(np.asarray(self.observation, dtype=np.float64))
        single = obs.ndim == 1
        obs = obs.reshape(-1, obs.shape[-1])
        B = obs.shape[0]
        instr = NULL_INSTRUCTION if self.instruction is None else self.instruction
        instr = torch.as_tensor(np.asarray(instr, dtype=np.int64)).reshape(-1)
        if instr.numel() == 1 and B > 1:
            instr = instr.expand(B)
        tau = torch.as_tensor(np.asarray(self.tau, dtype=np.float64)).reshape(-1)
        if tau.numel() == 1 and B > 1:
            tau = tau.expand(B)
        if instr.shape[0] != B or tau.shape[0] != B:
            raise ShapeError("condition batch sizes disagree")
        if ((instr < NULL_INSTRUCTION) | (instr >= vocab)).any():
            raise ValueError(f"instruction id out of range [0, {vocab})")
        if ((tau < 0) | (tau > 1)).any() or not torch.isfinite(tau).all():
            raise ValueError("flow time must lie in [0, 1]")
        if not torch.isfinite(obs).all():
            raise NonFiniteError("non-finite observation")
        # NULL lives in the last embedding row
        instr = torch.where(instr == NULL_INSTRUCTION, torch.full_like(instr, vocab), instr)
        return obs, instr, tau, single


def timestep_embedding(tau: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of flow time; tau is scaled by 1000 first."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=DTYPE) / half)
    args = 1000.0 * tau[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class Block(nn.Module):
    def __init__(self, hidden: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(hidden, 3 * hidden, dtype=DTYPE)
        self.proj = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.fc1 = nn.Linear(hidden, mlp_ratio * hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(mlp_ratio * hidden, hidden, dtype=DTYPE)
        # shift/scale/gate for attention and MLP
        self.ada = nn.Linear(hidden, 6 * hidden, dtype=DTYPE)

    def modulation(self, c_act):
        return self.ada(c_act).chunk(6, dim=-1)

    def forward(self, x, mods, mode: AttentionMode, rng):
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = mods
        B, T, D = x.shape
        h = modulate(F.layer_norm(x, (D,)), shift_a, scale_a)
        qkv = self.qkv(h)
        if mode.kind == "identity":
            # identity map: every token keeps its own value vector
            att = qkv[..., 2 * D :]
        else:
            q, k, v = qkv.reshape(B, T, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
            att = _attend(q, k, v, mode, rng).transpose(1, 2).reshape(B, T, D)
        x = x + gate_a.unsqueeze(1) * self.proj(att)
        h = modulate(F.layer_norm(x, (D,)), shift_m, scale_m)
        x = x + gate_m.unsqueeze(1) * self.fc2(F.silu(self.fc1(h)))
        return x


class PolicyNet(nn.Module):
    """Flow-matching action head ``v(A^tau, obs, instruction, tau)``.

    The token sequence holds only the ``chunk`` action tokens; the condition
    enters every block through adaptive layer-norm modulation.
    """

    def __init__(self, cfg: NetConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        D = cfg.hidden
        self.action_in = nn.Linear(cfg.action_dim, D, dtype=DTYPE)
        self.pos = nn.Parameter(torch.zeros(cfg.chunk, D, dtype=DTYPE))
        self.obs_in = nn.Linear(cfg.obs_dim, D, dtype=DTYPE)
        self.obs_out = nn.Linear(D, D, dtype=DTYPE)
        self.instr_table = nn.Parameter(torch.zeros(cfg.vocab + 1, D, dtype=DTYPE))
        self.time_in = nn.Linear(cfg.freq_dim, D, dtype=DTYPE)
        self.time_out = nn.Linear(D, D, dtype=DTYPE)
        self.blocks = nn.ModuleList(Block(D, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.num_layers))
        self.final_ada = nn.Linear(D, 2 * D, dtype=DTYPE)
        self.action_out = nn.Linear(D, cfg.action_dim, dtype=DTYPE)
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(int(seed))
        for name, p in self.named_parameters():
            if name in ("pos", "instr_table"):
                p.copy_(0.02 * torch.randn(p.shape, generator=gen, dtype=DTYPE))
                continue
            module = self.get_submodule(name.rsplit(".", 1)[0])
            bound = 1.0 / math.sqrt(module.in_features)
            if name.endswith("ada.bias"):
                p.zero_()
            else:
                p.uniform_(-bound, bound, generator=gen)

    # -- pieces, exposed so the sampler can share a prefix between branches --

    def encode_condition(self, cond: ConditionInput) -> torch.Tensor:
        obs, instr, tau, single = cond.tensors(self.cfg.vocab)
        c = (
            self.obs_out(F.silu(self.obs_in(obs)))
            + self.instr_table[instr]
            + self.time_out(F.silu(self.time_in(timestep_embedding(tau, self.cfg.freq_dim))))
        )
        return c[0] if single else c

    def modulations(self, c: torch.Tensor):
        c = F.silu(c.reshape(-1, self.cfg.hidden))
        return [blk.modulation(c) for blk in self.blocks], self.final_ada(c).chunk(2, dim=-1)

    def embed(self, chunk: torch.Tensor) -> torch.Tensor:
        return self.action_in(chunk) + self.pos

    def run_blocks(self, x, block_mods, start: int, stop: int, perturb: PerturbationConfig, rng):
        for i in range(start, stop):
            x = self.blocks[i](x, block_mods[i], perturb.get(i, NORMAL), rng)
        return x

    def head(self, x, final_mods):
        shift, scale = final_mods
        return self.action_out(modulate(F.layer_norm(x, (x.shape[-1],)), shift, scale))

    def check_chunk(self, chunk) -> tuple[torch.Tensor, bool]:
        chunk = torch.as_tensor(chunk, dtype=DTYPE)
        single = chunk.ndim == 2
        chunk = chunk.reshape(-1, *chunk.shape[-2:]) if chunk.ndim >= 2 else chunk
        if chunk.ndim != 3 or chunk.shape[1:] != (self.cfg.chunk, self.cfg.action_dim):
            raise ShapeError(
                f"chunk shape {tuple(chunk.shape)} does not match ({self.cfg.chunk}, {self.cfg.action_dim})"
            )
        return chunk, single

    def check_perturb(self, perturb: Optional[PerturbationConfig]) -> PerturbationConfig:
        perturb = perturb or {}
        for i in perturb:
            if not 0 <= i < self.cfg.num_layers:
                raise ValueError(f"perturbation layer {i} outside [0, {self.cfg.num_layers})")
        return perturb

    def forward(self, chunk, cond: ConditionInput, perturb=None, rng=None, capture=None):
        chunk, single = self.check_chunk(chunk)
        perturb = self.check_perturb(perturb)
        if capture is not None and not 0 <= capture <= self.cfg.num_layers:
            raise ValueError(f"capture index {capture} outside [0, {self.cfg.num_layers}]")
        block_mods, final_mods = self.modulations(self.encode_condition(cond))
        if block_mods[0][0].shape[0] != chunk.shape[0]:
            raise ShapeError("chunk and condition batch sizes disagree")
        x = self.embed(chunk)
        cached = None
        if capture is not None:
            x = self.run_blocks(x, block_mods, 0, capture, perturb, rng)
            cached = x
            x = self.run_blocks(x, block_mods, capture, self.cfg.num_layers, perturb, rng)
        else:
            x = self.run_blocks(x, block_mods, 0, self.cfg.num_layers, perturb, rng)
        v = self.head(x, final_mods)
        if single:
            v = v[0]
            cached = None if cached is None else cached[0]
        return v, cached


def encode_condition(net: PolicyNet, cond: ConditionInput) -> torch.Tensor:
    return net.encode_condition(cond)


def dit_forward(net: PolicyNet, chunk, cond: ConditionInput, perturb=None, rng=None, capture=None):
    """Predict the flow field for ``chunk``; optionally also return the hidden
    features entering block ``capture``."""
    return net(chunk, cond, perturb, rng, capture)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
