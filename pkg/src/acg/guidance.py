"""Euler sampling with guidance.

Every method integrates ``A <- A + delta * v`` from Gaussian noise at
``tau = 0`` to ``tau = 1``. Guided methods build ``v`` by extrapolating the
conditional field away from a reference field:

    v = (1 + lambda) * v_main - lambda * v_ref

The reference is the null-instruction field (``cfg``), the identity-attention
field (``acg``), or a field with white noise injected into the value tokens
(``wng``).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .policy_net import (
    DTYPE,
    NULL_INSTRUCTION,
    ConditionInput,
    NonFiniteError,
    ShapeError,
    feature_noise,
    feature_smooth,
    gaussian_kernel,
    identity_perturbation,
)

DEFAULT_LAYERS = (3, 4, 5)
KINDS = ("vanilla", "cfg", "acg", "wng", "incoherent", "ensemble", "smooth_action", "smooth_feature")


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")

    @property
    def step_size(self) -> float:
        return 1.0 / self.num_steps


@dataclass(frozen=True)
class GuidanceMethod:
    kind: str = "vanilla"
    scale: float = 0.0
    layers: tuple = ()
    sigma: float = 0.0
    n: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown guidance method {self.kind!r}")
        object.__setattr__(self, "layers", tuple(sorted(set(int(i) for i in self.layers))))
        if self.scale < 0 or self.sigma < 0:
            raise ValueError("guidance scale and sigma must be >= 0")
        if self.n < 1:
            raise ValueError("ensemble size must be >= 1")

    @classmethod
    def vanilla(cls):
        return cls("vanilla")

    @classmethod
    def cfg(cls, scale=3.0):
        return cls("cfg", scale=scale)

    @classmethod
    def acg(cls, scale=3.0, layers=DEFAULT_LAYERS):
        return cls("acg", scale=scale, layers=layers)

    @classmethod
    def wng(cls, scale=3.0, sigma=1.0, layers=DEFAULT_LAYERS):
        return cls("wng", scale=scale, sigma=sigma, layers=layers)

    @classmethod
    def incoherent(cls, layers=DEFAULT_LAYERS):
        return cls("incoherent", layers=layers)

    @classmethod
    def ensemble(cls, n=2):
        return cls("ensemble", n=n)

    @classmethod
    def smooth_action(cls, sigma=0.1):
        return cls("smooth_action", sigma=sigma)

    @classmethod
    def smooth_feature(cls, sigma=0.1, layers=DEFAULT_LAYERS):
        return cls("smooth_feature", sigma=sigma, layers=layers)

    @property
    def tag(self) -> str:
        parts = [self.kind]
        if self.kind in ("cfg", "acg", "wng"):
            parts.append(f"lambda={self.scale:g}")
        if self.kind in ("acg", "wng", "incoherent", "smooth_feature"):
            parts.append("layers=" + "-".join(map(str, self.layers)))
        if self.kind in ("wng", "smooth_action", "smooth_feature"):
            parts.append(f"sigma={self.sigma:g}")
        if self.kind == "ensemble":
            parts.append(f"n={self.n}")
        return ":".join(parts)

    def validate(self, num_layers: int):
        bad = [i for i in self.layers if not 0 <= i < num_layers]
        if bad:
            raise ValueError(f"{self.tag}: layer indices {bad} outside [0, {num_layers})")


@dataclass
class StepRecord:
    tau: float
    v_main: np.ndarray
    v_ref: Optional[np.ndarray]
    combined: np.ndarray
    seconds: float


@dataclass
class GuidedStepTrace:
    records: list = field(default_factory=list)


def combine_guided(v_main, v_ref, scale: float):
    if tuple(v_main.shape) != tuple(v_ref.shape):
        raise ShapeError(f"field shapes differ: {tuple(v_main.shape)} vs {tuple(v_ref.shape)}")
    # Written as v + s * (v - r): identical fields then give v back bit for bit, which
    # (1 + s) * v - s * r does not guarantee in floating point.
    return v_main + scale * (v_main - v_ref)


def smooth_sequence(seq, sigma: float, axis: int = 0) -> np.ndarray:
    """Gaussian filter along ``axis`` (truncated at 4 sigma, renormalized, edge-replicated)."""
    seq = np.asarray(seq, dtype=np.float64)
    taps = gaussian_kernel(sigma)
    if len(taps) == 1:
        return seq.copy()
    radius = len(taps) // 2
    x = np.moveaxis(seq, axis, 0)
    T = x.shape[0]
    padded = np.pad(x, [(radius, radius)] + [(0, 0)] * (x.ndim - 1), mode="edge")
    out = x.copy()
    for j, w in enumerate(taps):
        if j != radius:
            out += w * (padded[j : j + T] - x)
    return np.moveaxis(out, 0, axis)


def _two_branch(net, chunk, cond, ref_perturb, rng):
    """Main and reference fields sharing every block before the first perturbed layer."""
    L = net.cfg.num_layers
    start = min(ref_perturb, default=L)
    block_mods, final_mods = net.modulations(net.encode_condition(cond))
    x = net.run_blocks(net.embed(chunk), block_mods, 0, start, {}, rng)
    v_main = net.head(net.run_blocks(x, block_mods, start, L, {}, rng), final_mods)
    v_ref = net.head(net.run_blocks(x, block_mods, start, L, ref_perturb, rng), final_mods)
    return v_main, v_ref


def incoherent_vector(net, chunk, cond: ConditionInput, layers) -> torch.Tensor:
    """Field with the listed self-attention layers replaced by identity maps."""
    with torch.no_grad():
        return net(chunk, cond, identity_perturbation(layers))[0]


def guided_step_with_cache(net, chunk, cond: ConditionInput, layers, scale: float, cache_point: int, rng=None):
    """ACG field from one shared prefix (blocks ``< cache_point``) and two branch completions."""
    layers = sorted(set(layers))
    if not 0 <= cache_point <= min(layers, default=net.cfg.num_layers):
        raise ValueError(f"cache point {cache_point} must not exceed the first perturbed layer {layers[:1]}")
    chunk, single = net.check_chunk(chunk)
    perturb = net.check_perturb(identity_perturbation(layers))
    L = net.cfg.num_layers
    with torch.no_grad():
        block_mods, final_mods = net.modulations(net.encode_condition(cond))
        x = net.run_blocks(net.embed(chunk), block_mods, 0, cache_point, {}, rng)
        v_main = net.head(net.run_blocks(x, block_mods, cache_point, L, {}, rng), final_mods)
        v_ref = net.head(net.run_blocks(x, block_mods, cache_point, L, perturb, rng), final_mods)
    out = combine_guided(v_main, v_ref, scale)
    return out[0] if single else out


def _as_batch(observation, instruction):
    obs = np.asarray(observation, dtype=np.float64)
    single = obs.ndim == 1
    obs = obs.reshape(-1, obs.shape[-1])
    instr = NULL_INSTRUCTION if instruction is None else instruction
    instr = np.broadcast_to(np.asarray(instr, dtype=np.int64), (len(obs),)).copy()
    return obs, instr, single


def _integrate(net, obs, instr, scfg, method, rng, trace, initial):
    k, M, L = net.cfg.chunk, net.cfg.action_dim, net.cfg.num_layers
    B = len(obs)
    if initial is None:
        A = torch.from_numpy(rng.standard_normal((B, k, M)))
    else:
        A = torch.as_tensor(np.broadcast_to(np.asarray(initial, dtype=np.float64), (B, k, M)).copy())
    kind = method.kind
    delta = scfg.step_size
    null = np.full_like(instr, NULL_INSTRUCTION)
    ref_perturb = None
    if kind == "acg":
        ref_perturb = identity_perturbation(method.layers)
    elif kind == "wng":
        ref_perturb = {i: feature_noise(method.sigma) for i in method.layers}
    single_perturb = {}
    if kind == "incoherent":
        single_perturb = identity_perturbation(method.layers)
    elif kind == "smooth_feature":
        single_perturb = {i: feature_smooth(method.sigma) for i in method.layers}

    for i in range(scfg.num_steps):
        tau = i / scfg.num_steps
        cond = ConditionInput(obs, instr, tau)
        t0 = time.perf_counter()
        v_ref = None
        if kind == "cfg":
            v_main = net(A, cond)[0]
            v_ref = net(A, ConditionInput(obs, null, tau))[0]
        elif ref_perturb is not None:
            if hasattr(net, "run_blocks"):
                v_main, v_ref = _two_branch(net, A, cond, ref_perturb, rng)
            else:
                v_main = net(A, cond)[0]
                v_ref = net(A, cond, ref_perturb, rng)[0]
        else:
            v_main = net(A, cond, single_perturb, rng)[0]
        v = v_main if v_ref is None else combine_guided(v_main, v_ref, method.scale)
        if not torch.isfinite(v).all():
            raise NonFiniteError(f"non-finite field at denoising step {i} ({method.tag})")
        if trace is not None:
            trace.records.append(
                StepRecord(
                    tau, v_main.numpy().copy(), None if v_ref is None else v_ref.numpy().copy(),
                    v.numpy().copy(), time.perf_counter() - t0,
                )
            )
        A = A + delta * v
    return A.numpy()


def euler_sample(
    net,
    observation,
    instruction,
    scfg: SamplerConfig,
    method: GuidanceMethod,
    rng: np.random.Generator,
    trace: Optional[GuidedStepTrace] = None,
    initial=None,
) -> np.ndarray:
    """Generate an action chunk (in network units) for one or a batch of observations.

    ``initial`` overrides the Gaussian starting chunk. Ensembles draw one
    starting chunk per member from ``rng`` in member order.
    """
    method.validate(net.cfg.num_layers)
    obs, instr, single = _as_batch(observation, instruction)
    with torch.no_grad():
        if method.kind == "ensemble":
            vanilla = GuidanceMethod.vanilla()
            members = [_integrate(net, obs, instr, scfg, vanilla, rng, trace, initial) for _ in range(method.n)]
            A = np.mean(np.stack(members), axis=0)
        else:
            A = _integrate(net, obs, instr, scfg, method, rng, trace, initial)
    if method.kind == "smooth_action":
        A = smooth_sequence(A, method.sigma, axis=-2)
    return A[0] if single else A


def ensemble_sample(net, observation, instruction, scfg, n: int, rng, initial=None) -> np.ndarray:
    if n < 1:
        raise ValueError("ensemble size must be >= 1")
    return euler_sample(net, observation, instruction, scfg, GuidanceMethod.ensemble(n), rng, initial=initial)


class SamplerPolicy:
    """Chunk policy for closed-loop rollouts; returns actions in environment units."""

    def __init__(self, net, scfg: SamplerConfig, method: GuidanceMethod, action_scale: float = 1.0):
        method.validate(net.cfg.num_layers)
        self.net, self.scfg, self.method = net, scfg, method
        self.action_scale = action_scale
        self.chunk = net.cfg.chunk

    def __call__(self, obs, instr, rng):
        A = euler_sample(self.net, obs, instr, self.scfg, self.method, rng)
        return self.action_scale * A
