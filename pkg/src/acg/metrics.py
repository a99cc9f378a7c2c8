"""Action-coherence metrics.

Both metrics use a unit timestep, so values are per-step quantities in the
units of the recorded actions/states.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, S) executed positions, including the start
    actions: np.ndarray  # (T, M) executed commands
    success: bool
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64).reshape(len(self.states), -1)
        self.actions = np.asarray(self.actions, dtype=np.float64).reshape(len(self.actions), -1)
        if len(self.states) < 1:
            raise ValueError("trajectory needs at least one state")
        if not (np.isfinite(self.states).all() and np.isfinite(self.actions).all()):
            raise ValueError("trajectory contains non-finite values")
        self.success = bool(self.success)

    @property
    def method(self) -> str:
        return self.meta.get("method", "")


def atv(actions) -> float:
    """Mean absolute per-step change, averaged over action dimensions."""
    a = np.asarray(actions, dtype=np.float64)
    a = a.reshape(len(a), -1)
    T, M = a.shape
    if T < 2:
        raise ValueError("ATV needs at least two actions")
    return float(np.abs(np.diff(a, axis=0)).sum() / (M * (T - 1)))


def jerk_rms(states) -> float:
    """RMS of the forward third difference of the state sequence."""
    s = np.asarray(states, dtype=np.float64)
    s = s.reshape(len(s), -1)
    T = len(s)
    if T < 4:
        raise ValueError("JerkRMS needs at least four states")
    j = s[3:] - 3 * s[2:-1] + 3 * s[1:-2] - s[:-3]
    return float(np.sqrt((j**2).sum() / (T - 3)))


@dataclass
class MetricSummary:
    method: str
    episodes: int
    window: int
    atv_mean: float
    atv_std: float
    jerk_mean: float
    jerk_std: float
    success_rate: float


def _mean_std(xs):
    xs = np.asarray(xs, dtype=np.float64)
    std = float(xs.std(ddof=1)) if len(xs) > 1 else 0.0
    return float(xs.mean()), std


def summarize(trajs, approach_window: int = 64) -> dict[str, MetricSummary]:
    """Per-method mean and sample std of ATV/JerkRMS over the approach window.

    ATV uses ``actions[:W]`` and JerkRMS ``states[:W]`` with
    ``W = min(T, approach_window)``.
    """
    if not trajs:
        raise ValueError("no trajectories to summarize")
    if approach_window < 4:
        raise ValueError("approach window must be >= 4")
    groups = defaultdict(list)
    for tr in trajs:
        groups[tr.method].append(tr)
    out = {}
    for method, group in groups.items():
        atvs = [atv(tr.actions[:approach_window]) for tr in group]
        jerks = [jerk_rms(tr.states[:approach_window]) for tr in group]
        a_m, a_s = _mean_std(atvs)
        j_m, j_s = _mean_std(jerks)
        rate = sum(tr.success for tr in group) / len(group)
        out[method] = MetricSummary(method, len(group), approach_window, a_m, a_s, j_m, j_s, rate)
    return out
