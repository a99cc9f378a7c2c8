"""Flow-matching objective and a small deterministic trainer.

A noisy chunk is ``tau * clean + (1 - tau) * noise``; the network regresses
the straight-line velocity ``clean - noise``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch

from .checkpoint import Checkpoint
from .data import DemoDataset
from .policy_net import DTYPE, NULL_INSTRUCTION, ConditionInput, PolicyNet, ShapeError

log = logging.getLogger(__name__)


class NonFiniteLossError(ArithmeticError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


def _check_same_shape(*arrays):
    shapes = {tuple(a.shape) for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"shape mismatch: {sorted(shapes)}")


def interpolate(clean, noise, tau: float):
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    _check_same_shape(clean, noise)
    return tau * clean + (1.0 - tau) * noise


def target_vector(clean, noise):
    _check_same_shape(clean, noise)
    return clean - noise


def fm_loss(v_pred, clean, noise):
    """Mean squared error against the straight-line target, over every entry."""
    _check_same_shape(v_pred, clean, noise)
    return ((v_pred - target_vector(clean, noise)) ** 2).mean()


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    total_steps: int = 20000
    learning_rate: float = 2e-4
    warmup_steps: int = 100
    condition_dropout_p: float = 0.1
    chunk_length: int = 16
    seed: int = 0
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.condition_dropout_p < 1.0:
            raise ValueError("condition_dropout_p must lie in [0, 1)")
        if self.total_steps < 0 or self.warmup_steps < 0 or self.chunk_length < 1:
            raise ValueError("steps and chunk length must be non-negative")

    def lr_at(self, step: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.learning_rate * (step + 1) / self.warmup_steps
        return self.learning_rate


class TrainingBatch(NamedTuple):
    observation: np.ndarray  # (B, obs_dim)
    instruction: np.ndarray  # (B,), NULL_INSTRUCTION where dropped
    clean: np.ndarray  # (B, k, M), actions divided by the dataset action scale
    noise: np.ndarray  # (B, k, M)
    tau: np.ndarray  # (B,)


class ChunkIndex:
    """Flattened view of a dataset: one row per (episode, start step).

    ``window[i]`` lists the k action rows of the chunk starting at row ``i``,
    clamped at the episode's last step.
    """

    def __init__(self, ds: DemoDataset, k: int):
        if not ds.episodes:
            raise ValueError("empty dataset")
        self.observations = np.concatenate([ep.observations for ep in ds.episodes])
        self.instructions = np.concatenate([ep.instructions for ep in ds.episodes])
        self.actions = np.concatenate([ep.actions for ep in ds.episodes]) / ds.metadata.get("action_scale", 1.0)
        windows, offset = [], 0
        for ep in ds.episodes:
            T = len(ep)
            t = np.arange(T)[:, None] + np.arange(k)[None, :]
            windows.append(offset + np.minimum(t, T - 1))
            offset += T
        self.window = np.concatenate(windows)

    def __len__(self):
        return len(self.window)


def sample_training_batch(ds: DemoDataset, cfg: TrainConfig, rng: np.random.Generator, index=None) -> TrainingBatch:
    if index is None:
        index = ChunkIndex(ds, cfg.chunk_length)
    B = cfg.batch_size
    rows = rng.integers(0, len(index), size=B)
    clean = index.actions[index.window[rows]]
    noise = rng.standard_normal(clean.shape)
    tau = rng.random(B)
    drop = rng.random(B) < cfg.condition_dropout_p
    instr = np.where(drop, NULL_INSTRUCTION, index.instructions[rows])
    return TrainingBatch(index.observations[rows], instr, clean, noise, tau)


def batch_loss(net: PolicyNet, batch: TrainingBatch) -> torch.Tensor:
    clean = torch.from_numpy(batch.clean)
    noise = torch.from_numpy(batch.noise)
    tau = torch.from_numpy(batch.tau)
    noisy = tau[:, None, None] * clean + (1.0 - tau[:, None, None]) * noise
    v, _ = net(noisy, ConditionInput(batch.observation, batch.instruction, batch.tau))
    return fm_loss(v, clean, noise)


class FlatAdaptive:
    """Adaptive per-parameter steps without momentum (Adam with beta1 = 0).

    Parameters are re-pointed into one flat buffer so each update is a few
    vector ops rather than one kernel per tensor.
    """

    def __init__(self, params, beta2: float, eps: float):
        self.params = list(params)
        self.flat = torch.nn.utils.parameters_to_vector(self.params).detach().clone()
        torch.nn.utils.vector_to_parameters(self.flat, self.params)
        self.sq = torch.zeros_like(self.flat)
        self.beta2, self.eps, self.t = beta2, eps, 0

    def step(self, lr: float):
        g = torch.cat([p.grad.reshape(-1) for p in self.params])
        self.t += 1
        self.sq.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
        denom = (self.sq / (1.0 - self.beta2**self.t)).sqrt_().add_(self.eps)
        with torch.no_grad():
            self.flat.addcdiv_(g, denom, value=-lr)


def _check_dims(ds: DemoDataset, net: PolicyNet, cfg: TrainConfig):
    nc = net.cfg
    if (ds.action_dim, ds.obs_dim) != (nc.action_dim, nc.obs_dim) or ds.vocab > nc.vocab:
        raise ShapeError(
            f"dataset (M={ds.action_dim}, obs={ds.obs_dim}, vocab={ds.vocab}) does not fit net "
            f"(M={nc.action_dim}, obs={nc.obs_dim}, vocab={nc.vocab})"
        )
    if cfg.chunk_length != nc.chunk:
        raise ShapeError(f"chunk length {cfg.chunk_length} != net chunk {nc.chunk}")


def train(ds: DemoDataset, net: PolicyNet, cfg: TrainConfig, progress=None):
    """Run ``cfg.total_steps`` optimizer steps on the flow-matching loss.

    Returns ``(checkpoint, losses)``. ``progress(step, loss)`` is called every
    step when given.
    """
    _check_dims(ds, net, cfg)
    index = ChunkIndex(ds, cfg.chunk_length)
    rng = np.random.default_rng(cfg.seed)
    opt = FlatAdaptive(net.parameters(), cfg.beta2, cfg.eps)
    losses = []
    net.train()
    for step in range(cfg.total_steps):
        batch = sample_training_batch(ds, cfg, rng, index)
        loss = batch_loss(net, batch)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(step, value)
        net.zero_grad(set_to_none=False)
        loss.backward()
        opt.step(cfg.lr_at(step))
        losses.append(value)
        if progress is not None:
            progress(step, value)
    net.eval()
    ckpt = Checkpoint.from_net(net, step=cfg.total_steps, seed=cfg.seed, action_scale=ds.metadata.get("action_scale", 1.0))
    return ckpt, np.asarray(losses)
