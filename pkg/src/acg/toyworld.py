"""2-D point-mass reach-and-hold world with a scripted, noisy demonstrator.

The agent commands a velocity each step. An episode succeeds once the point
stays within ``success_radius`` of the instructed goal for ``hold_steps``
consecutive steps, so jittery commands near the goal cost success.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .data import DemoDataset, Episode
from .metrics import Trajectory, atv

_CLIP_SLACK = 1e-9  # already-clipped actions pass through unchanged


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 1.0
    bound: float = 1.0
    num_goals: int = 3
    success_radius: float = 0.04
    hold_steps: int = 5
    max_steps: int = 120
    max_speed: float = 0.08

    def __post_init__(self):
        if self.success_radius <= 0 or self.max_speed <= 0:
            raise ValueError("success_radius and max_speed must be > 0")
        if self.hold_steps < 1 or self.max_steps < self.hold_steps:
            raise ValueError("need 1 <= hold_steps <= max_steps")
        if self.num_goals < 1:
            raise ValueError("need at least one goal")

    @property
    def obs_dim(self) -> int:
        return 2 + 3 * self.num_goals


@dataclass(frozen=True)
class NoiseConfig:
    jitter_sigma: float = 0.02
    pause_prob: float = 0.02
    pause_min: int = 2
    pause_max: int = 5
    jerk_prob: float = 0.5
    jerk_magnitude: float = 0.15
    seed: int = 0
    # the demonstrator reacts to its own noisy state instead of replaying a clean plan
    closed_loop: bool = True

    def __post_init__(self):
        if not (0 <= self.pause_prob <= 1 and 0 <= self.jerk_prob <= 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.jitter_sigma < 0 or self.jerk_magnitude < 0:
            raise ValueError("noise magnitudes must be >= 0")
        if not 1 <= self.pause_min <= self.pause_max:
            raise ValueError("need 1 <= pause_min <= pause_max")

    @classmethod
    def clean(cls) -> "NoiseConfig":
        return cls(jitter_sigma=0.0, pause_prob=0.0, jerk_prob=0.0, jerk_magnitude=0.0)

    @property
    def is_clean(self) -> bool:
        return self.jitter_sigma == 0 and self.pause_prob == 0 and (self.jerk_prob == 0 or self.jerk_magnitude == 0)


@dataclass(frozen=True)
class EnvState:
    position: np.ndarray
    goals: np.ndarray  # (G, 2)
    target: int
    steps: int = 0
    in_radius: int = 0

    @property
    def goal(self) -> np.ndarray:
        return self.goals[self.target]


# ---------------------------------------------------------------------------
# environment


def _goal_box(cfg: EnvConfig):
    lo_y = max(0.1, 2 * cfg.success_radius)
    return np.array([-0.9, lo_y]), np.array([0.9, 0.9])


def fallback_goals(cfg: EnvConfig) -> np.ndarray:
    xs = np.linspace(-0.9, 0.9, cfg.num_goals) if cfg.num_goals > 1 else np.zeros(1)
    return np.stack([xs, np.full(cfg.num_goals, 0.5)], axis=1)


def env_reset(cfg: EnvConfig, rng: np.random.Generator, max_attempts: int = 1000) -> EnvState:
    """Start in the lower half; goals in the upper band, pairwise >= 4r apart."""
    b = cfg.bound
    position = np.array([rng.uniform(-b, b), rng.uniform(-b, 0.0)])
    lo, hi = _goal_box(cfg)
    min_sep = 4 * cfg.success_radius
    goals = None
    for _ in range(max_attempts):
        cand = rng.uniform(lo, hi, size=(cfg.num_goals, 2))
        d = np.linalg.norm(cand[:, None] - cand[None], axis=-1)
        if np.all(d[np.triu_indices(cfg.num_goals, 1)] >= min_sep):
            goals = cand
            break
    if goals is None:
        goals = fallback_goals(cfg)
    target = int(rng.integers(cfg.num_goals))
    return EnvState(position, goals, target)


def clip_speed(action, max_speed: float) -> np.ndarray:
    action = np.asarray(action, dtype=np.float64)
    norm = np.linalg.norm(action)
    if norm > max_speed * (1 + _CLIP_SLACK):
        return action * (max_speed / norm)
    return action


def env_step(state: EnvState, action, cfg: EnvConfig):
    """Advance one step. Returns ``(state, executed_action, done, success)``."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (2,) or not np.isfinite(action).all():
        raise ValueError(f"action must be a finite 2-vector, got {action!r}")
    a = clip_speed(action, cfg.max_speed)
    pos = np.clip(state.position + a * cfg.dt, -cfg.bound, cfg.bound)
    inside = np.linalg.norm(pos - state.goal) <= cfg.success_radius
    count = state.in_radius + 1 if inside else 0
    nxt = EnvState(pos, state.goals, state.target, state.steps + 1, count)
    success = count >= cfg.hold_steps
    return nxt, a, success or nxt.steps >= cfg.max_steps, success


def observe(state: EnvState) -> np.ndarray:
    onehot = np.zeros(len(state.goals))
    onehot[state.target] = 1.0
    return np.concatenate([state.position, state.goals.reshape(-1), onehot])


def state_from_observation(obs, cfg: EnvConfig) -> EnvState:
    G = cfg.num_goals
    obs = np.asarray(obs, dtype=np.float64)
    return EnvState(obs[:2].copy(), obs[2 : 2 + 2 * G].reshape(G, 2).copy(), int(np.argmax(obs[2 + 2 * G :])))


def expert_action(state: EnvState, cfg: EnvConfig) -> np.ndarray:
    delta = state.goal - state.position
    if np.linalg.norm(delta) <= cfg.success_radius / 2:
        return np.zeros(2)
    return clip_speed(0.5 * delta, cfg.max_speed)


# ---------------------------------------------------------------------------
# demonstrations


def expert_episode(cfg: EnvConfig, start) -> tuple[Episode, bool]:
    """Clean expert run from ``start`` (an :class:`EnvState` or a Generator used to reset)."""
    state = env_reset(cfg, start) if isinstance(start, np.random.Generator) else start
    obs, acts = [], []
    done = success = False
    while not done:
        obs.append(observe(state))
        state, a, done, success = env_step(state, expert_action(state, cfg), cfg)
        acts.append(a)
    return Episode(np.full(len(acts), state.target), np.array(obs), np.array(acts)), success


def replay(initial_obs, actions, cfg: EnvConfig):
    """Execute ``actions`` open loop from the state encoded in ``initial_obs``.

    Returns ``(observations, executed_actions, positions)`` where positions
    has one more row than actions.
    """
    state = state_from_observation(initial_obs, cfg)
    obs, executed, positions = [], [], [state.position]
    for a in actions:
        obs.append(observe(state))
        state, a_exec, _, _ = env_step(state, a, cfg)
        executed.append(a_exec)
        positions.append(state.position)
    return np.array(obs), np.array(executed), np.array(positions)


def _insert_pauses(actions: np.ndarray, ncfg: NoiseConfig, rng) -> np.ndarray:
    T = len(actions)
    out = []
    for t in range(T):
        if ncfg.pause_prob > 0 and rng.random() < ncfg.pause_prob:
            h = int(rng.integers(ncfg.pause_min, ncfg.pause_max + 1))
            out.extend([np.zeros(2)] * h)
        out.append(actions[t])
    return np.array(out[:T])


def apply_jerk(actions: np.ndarray, step: int, magnitude: float, angle: float) -> np.ndarray:
    out = actions.copy()
    out[step] = out[step] + magnitude * np.array([np.cos(angle), np.sin(angle)])
    return out


def inject_noise(episode: Episode, ncfg: NoiseConfig, rng: np.random.Generator, cfg: EnvConfig) -> Episode:
    """Corrupt a demonstration with jitter, frozen pauses and at most one jerk.

    The corrupted actions are replayed from the episode's first observation so
    stored observations stay consistent with the stored (executed) actions.
    """
    actions = episode.actions.copy()
    T = len(actions)
    if ncfg.jitter_sigma > 0:
        actions = actions + rng.normal(0.0, ncfg.jitter_sigma, size=actions.shape)
    actions = _insert_pauses(actions, ncfg, rng)
    if ncfg.jerk_prob > 0 and rng.random() < ncfg.jerk_prob:
        actions = apply_jerk(actions, int(rng.integers(T)), ncfg.jerk_magnitude, rng.uniform(0, 2 * np.pi))
    obs, executed, _ = replay(episode.observations[0], actions, cfg)
    return Episode(episode.instructions.copy(), obs, executed)


def noisy_expert_episode(
    cfg: EnvConfig, ncfg: NoiseConfig, rng: np.random.Generator, clean_length: int, start: EnvState
) -> tuple[Episode, bool]:
    """Run the expert with the same three corruptions applied as it acts.

    Each step the expert looks at the (already disturbed) state, so jitter and
    jerks get corrected instead of accumulating. The jerk step is drawn from
    the clean episode length. Runs until success or ``max_steps``.
    """
    jerk_step = -1
    angle = 0.0
    if ncfg.jerk_prob > 0 and rng.random() < ncfg.jerk_prob:
        jerk_step = int(rng.integers(clean_length))
        angle = rng.uniform(0, 2 * np.pi)
    state = start
    obs, acts = [], []
    pause_left = 0
    t = 0
    done = success = False
    while not done:
        if pause_left == 0 and ncfg.pause_prob > 0 and rng.random() < ncfg.pause_prob:
            pause_left = int(rng.integers(ncfg.pause_min, ncfg.pause_max + 1))
        if pause_left > 0:
            pause_left -= 1
            a = np.zeros(2)
        else:
            a = expert_action(state, cfg)
            if ncfg.jitter_sigma > 0:
                a = a + rng.normal(0.0, ncfg.jitter_sigma, size=2)
            if t == jerk_step:
                a = a + ncfg.jerk_magnitude * np.array([np.cos(angle), np.sin(angle)])
            t += 1
        obs.append(observe(state))
        state, a, done, success = env_step(state, a, cfg)
        acts.append(a)
    return Episode(np.full(len(acts), state.target), np.array(obs), np.array(acts)), success


def episode_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


def generate_dataset(cfg: EnvConfig, ncfg: NoiseConfig, num_episodes: int, seed: Optional[int] = None) -> DemoDataset:
    """Roll the expert, corrupt each episode, and pack the result.

    With ``ncfg.closed_loop`` the corruption happens while the expert acts
    (see :func:`noisy_expert_episode`); otherwise the clean episode is
    corrupted afterwards and replayed open loop. Every episode draws from its
    own child seed, so output does not depend on generation order.
    """
    if num_episodes < 1:
        raise ValueError("num_episodes must be >= 1")
    seed = ncfg.seed if seed is None else seed
    episodes = []
    for child in episode_seeds(seed, num_episodes):
        rng = np.random.default_rng(child)
        start = env_reset(cfg, rng)
        clean, success = expert_episode(cfg, start)
        assert success, "expert failed to reach its goal"
        if ncfg.closed_loop and not ncfg.is_clean:
            episodes.append(noisy_expert_episode(cfg, ncfg, rng, len(clean), start)[0])
        else:
            episodes.append(inject_noise(clean, ncfg, rng, cfg))
    meta = {
        "action_dim": 2,
        "obs_dim": cfg.obs_dim,
        "vocab": cfg.num_goals,
        "action_scale": cfg.max_speed,
        "env": dataclasses.asdict(cfg),
        "noise": dataclasses.asdict(ncfg),
        "seed": int(seed),
    }
    return DemoDataset(episodes, meta)


def dataset_atv(ds: DemoDataset) -> float:
    return float(np.mean([atv(ep.actions) for ep in ds.episodes if len(ep) >= 2]))


# ---------------------------------------------------------------------------
# closed-loop rollout

# policy(observations (B, obs_dim), instructions (B,), rng) -> chunks (B, k, 2)
ChunkPolicy = Callable[[np.ndarray, np.ndarray, np.random.Generator], np.ndarray]


class ExpertChunkPolicy:
    """Scripted oracle: simulates the expert k steps ahead from each observation."""

    def __init__(self, cfg: EnvConfig, chunk: int = 16):
        self.cfg, self.chunk = cfg, chunk

    def __call__(self, obs, instr, rng):
        out = np.zeros((len(obs), self.chunk, 2))
        for b, o in enumerate(obs):
            state = state_from_observation(o, self.cfg)
            for j in range(self.chunk):
                out[b, j] = expert_action(state, self.cfg)
                state, _, _, _ = env_step(state, out[b, j], self.cfg)
        return out


class ZeroPolicy:
    def __init__(self, chunk: int = 16):
        self.chunk = chunk

    def __call__(self, obs, instr, rng):
        return np.zeros((len(obs), self.chunk, 2))


def rollout_policy(
    policy: ChunkPolicy,
    cfg: EnvConfig,
    exec_horizon: int,
    episodes: int,
    seed: int,
    method_tag: str = "",
    chunk: Optional[int] = None,
) -> list[Trajectory]:
    """Run ``episodes`` closed-loop episodes in lockstep.

    Each round the policy proposes a chunk for every episode and the first
    ``exec_horizon`` actions are executed. Finished episodes stay in the
    batch (frozen) so the batch composition never changes. Resets come from
    per-episode child seeds of ``seed``; the policy draws from one shared
    stream, also derived from ``seed``.
    """
    chunk = chunk or getattr(policy, "chunk", None) or exec_horizon
    if not 1 <= exec_horizon <= chunk:
        raise ValueError(f"execution horizon must lie in [1, {chunk}], got {exec_horizon}")
    env_seq, policy_seq = np.random.SeedSequence(seed).spawn(2)
    states = [env_reset(cfg, np.random.default_rng(s)) for s in env_seq.spawn(episodes)]
    policy_rng = np.random.default_rng(policy_seq)
    positions = [[s.position] for s in states]
    actions = [[] for _ in states]
    done = [False] * episodes
    success = [False] * episodes
    while not all(done):
        obs = np.stack([observe(s) for s in states])
        instr = np.array([s.target for s in states])
        chunks = np.asarray(policy(obs, instr, policy_rng), dtype=np.float64)
        for b in range(episodes):
            for j in range(exec_horizon):
                if done[b]:
                    break
                states[b], a, done[b], success[b] = env_step(states[b], chunks[b, j], cfg)
                actions[b].append(a)
                positions[b].append(states[b].position)
    return [
        Trajectory(
            np.array(positions[b]), np.array(actions[b]), success[b],
            {"seed": seed, "episode": b, "method": method_tag},
        )
        for b in range(episodes)
    ]
