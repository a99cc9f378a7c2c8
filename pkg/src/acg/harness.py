"""Experiment plumbing shared by the command line and the acceptance suite.

Rollout cells, latency timing, versioned CSV output, trajectory dumps and
SVG overlays live here so the CLI stays a thin argument layer.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch

from .guidance import GuidanceMethod, SamplerConfig, SamplerPolicy, euler_sample
from .metrics import Trajectory, summarize
from .toyworld import EnvConfig, env_reset, observe, rollout_policy

RESULTS_SCHEMA = "acg-results v1"
LOSS_SCHEMA = "acg-loss v1"
LATENCY_SCHEMA = "acg-latency v1"
TRAJ_SCHEMA = "acg-trajectories v1"

LAMBDA_GRID = (0.0, 0.5, 1.0, 2.0, 3.0, 5.0, 8.0)
LAYER_PRESETS = {"front": (0, 1, 2), "middle": (3, 4, 5), "back": (5, 6, 7)}


def layer_set(text: str, num_layers: int = 8) -> tuple[int, ...]:
    """Resolve ``front``/``middle``/``back``, ``count:N`` or an explicit ``3-4-5`` list.

    ``count:N`` is N contiguous layers starting at index 3, shifted left when
    it would run past the last layer.
    """
    text = text.strip()
    if text in LAYER_PRESETS:
        return LAYER_PRESETS[text]
    if text.startswith("count:"):
        n = int(text.split(":", 1)[1])
        if not 1 <= n <= num_layers:
            raise ValueError(f"layer count must lie in [1, {num_layers}]")
        start = min(3, num_layers - n)
        return tuple(range(start, start + n))
    if text in ("", "none"):
        return ()
    return tuple(int(x) for x in text.replace(",", "-").split("-"))


@dataclass
class ResultRow:
    method: str
    kind: str
    scale: float
    layers: str
    sigma: float
    n: int
    exec_horizon: int
    seed: int
    episodes: int
    window: int
    success_rate: float
    atv_mean: float
    atv_std: float
    jerk_mean: float
    jerk_std: float

    FIELDS = (
        "method", "kind", "lambda", "layers", "sigma", "n", "exec_horizon", "seed", "episodes",
        "window", "success_rate", "atv_mean", "atv_std", "jerk_mean", "jerk_std",
    )

    def values(self) -> list:
        return [
            self.method, self.kind, repr(self.scale), self.layers, repr(self.sigma), self.n,
            self.exec_horizon, self.seed, self.episodes, self.window, repr(self.success_rate),
            repr(self.atv_mean), repr(self.atv_std), repr(self.jerk_mean), repr(self.jerk_std),
        ]


def run_cell(
    net,
    method: GuidanceMethod,
    seed: int,
    episodes: int,
    exec_horizon: int,
    env: EnvConfig = EnvConfig(),
    scfg: SamplerConfig = SamplerConfig(),
    action_scale: float = 1.0,
    window: int = 64,
) -> tuple[ResultRow, list[Trajectory]]:
    """Roll out one (method, seed) cell and summarize it.

    Resets and sampler noise depend on ``seed`` only, so cells that share a
    seed face the same start states and initial noise.
    """
    policy = SamplerPolicy(net, scfg, method, action_scale)
    trajs = rollout_policy(policy, env, exec_horizon, episodes, seed, method.tag)
    for tr in trajs:
        tr.meta["exec_horizon"] = exec_horizon
    return row_from_trajectories(method, seed, exec_horizon, trajs, window), trajs


def row_from_trajectories(method: GuidanceMethod, seed: int, exec_horizon: int, trajs, window: int) -> ResultRow:
    s = summarize(trajs, window)[method.tag]
    return ResultRow(
        method.tag, method.kind, float(method.scale), "-".join(map(str, method.layers)), float(method.sigma),
        method.n, exec_horizon, seed, s.episodes, window, s.success_rate, s.atv_mean, s.atv_std,
        s.jerk_mean, s.jerk_std,
    )


def measure_chunk_latency(
    net,
    method: GuidanceMethod,
    scfg: SamplerConfig = SamplerConfig(),
    env: EnvConfig = EnvConfig(),
    repeats: int = 50,
    warmup: int = 5,
    seed: int = 0,
) -> float:
    """Median wall-clock seconds to generate one chunk for a single observation."""
    if repeats < 1 or warmup < 0:
        raise ValueError("need repeats >= 1 and warmup >= 0")
    rng = np.random.default_rng(seed)
    state = env_reset(env, rng)
    obs = observe(state)
    times = []
    with torch.no_grad():
        for i in range(warmup + repeats):
            t0 = time.perf_counter()
            euler_sample(net, obs, state.target, scfg, method, rng)
            if i >= warmup:
                times.append(time.perf_counter() - t0)
    return statistics.median(times)


# ---------------------------------------------------------------------------
# CSV


def _csv_text(schema: str, header: Iterable[str], rows: Iterable[Iterable]) -> str:
    buf = io.StringIO()
    buf.write(f"# {schema}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_results_csv(rows: list[ResultRow], path) -> None:
    Path(path).write_text(_csv_text(RESULTS_SCHEMA, ResultRow.FIELDS, [r.values() for r in rows]), encoding="utf-8")


def read_csv(path) -> tuple[str, list[dict]]:
    """Return the schema comment and the rows as dicts of strings."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ValueError(f"{path}: missing schema comment line")
    return lines[0][2:], list(csv.DictReader(lines[1:]))


def write_loss_csv(losses, path) -> None:
    rows = ((i, repr(float(v))) for i, v in enumerate(losses))
    Path(path).write_text(_csv_text(LOSS_SCHEMA, ("step", "loss"), rows), encoding="utf-8")


def write_latency_csv(entries: list[tuple[str, float]], path) -> None:
    rows = ((tag, f"{sec:.6g}") for tag, sec in entries)
    Path(path).write_text(_csv_text(LATENCY_SCHEMA, ("method", "median_chunk_seconds"), rows), encoding="utf-8")


# ---------------------------------------------------------------------------
# trajectory dumps (JSON lines, one episode per line)


def dump_trajectories(trajs: list[Trajectory], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": TRAJ_SCHEMA}) + "\n")
        for tr in trajs:
            rec = {
                "method": tr.method,
                "seed": tr.meta.get("seed", 0),
                "episode": tr.meta.get("episode", 0),
                "exec_horizon": tr.meta.get("exec_horizon", 0),
                "success": tr.success,
                "states": tr.states.tolist(),
                "actions": tr.actions.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


class TrajectoryFileError(ValueError):
    pass


def load_trajectories(path) -> list[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TrajectoryFileError(f"line {lineno}: {exc}") from None
            if "schema" in rec:
                if rec["schema"] != TRAJ_SCHEMA:
                    raise TrajectoryFileError(f"line {lineno}: unsupported schema {rec['schema']!r}")
                continue
            try:
                actions = np.asarray(rec["actions"], dtype=np.float64).reshape(len(rec["actions"]), -1)
                meta = {k: rec.get(k, d) for k, d in (("method", ""), ("seed", 0), ("episode", 0), ("exec_horizon", 0))}
                out.append(Trajectory(rec["states"], actions, rec["success"], meta))
            except (KeyError, TypeError, ValueError) as exc:
                raise TrajectoryFileError(f"line {lineno}: bad record ({exc})") from None
    if not out:
        raise TrajectoryFileError(f"{path}: no trajectory records")
    return out


def rows_from_dump(trajs: list[Trajectory], window: int = 64) -> list[ResultRow]:
    """Re-summarize dumped trajectories per (method, seed, horizon) in first-seen order."""
    groups: dict[tuple, list[Trajectory]] = {}
    for tr in trajs:
        groups.setdefault((tr.method, tr.meta.get("seed", 0), tr.meta.get("exec_horizon", 0)), []).append(tr)
    rows = []
    for (tag, seed, horizon), group in groups.items():
        s = summarize(group, window)[tag]
        kind, scale, layers, sigma, n = _parse_tag(tag)
        rows.append(
            ResultRow(tag, kind, scale, layers, sigma, n, horizon, seed, s.episodes, window,
                      s.success_rate, s.atv_mean, s.atv_std, s.jerk_mean, s.jerk_std)
        )
    return rows


def _parse_tag(tag: str):
    parts = tag.split(":") if tag else [""]
    kv = dict(p.split("=", 1) for p in parts[1:] if "=" in p)
    return (
        parts[0],
        float(kv.get("lambda", 0.0)),
        kv.get("layers", ""),
        float(kv.get("sigma", 0.0)),
        int(kv.get("n", 1)),
    )


# ---------------------------------------------------------------------------
# SVG


def render_svg(trajs: list[Trajectory], goals_per_episode: Optional[list] = None, env: EnvConfig = EnvConfig(), title: str = "", size: int = 480) -> str:
    """Overlay 2-D paths; each segment darkens with its timestep, goals drawn as radius-r circles."""
    b = env.bound

    def px(p):
        return (p[0] + b) / (2 * b) * size, (b - p[1]) / (2 * b) * size

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 24}" viewBox="0 0 {size} {size + 24}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white" stroke="black"/>',
        f'<text x="4" y="{size + 17}" font-family="monospace" font-size="12">{title}</text>',
    ]
    for i, tr in enumerate(trajs):
        if goals_per_episode is not None:
            goals, target = goals_per_episode[i]
            for g_i, g in enumerate(np.asarray(goals)):
                cx, cy = px(g)
                rr = env.success_radius / (2 * b) * size
                stroke = "red" if g_i == target else "gray"
                parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{rr:.2f}" fill="none" stroke="{stroke}"/>')
        pts = tr.states[:, :2]
        T = max(len(pts) - 1, 1)
        for t in range(len(pts) - 1):
            shade = int(round(220 * (1 - t / T)))
            (x0, y0), (x1, y1) = px(pts[t]), px(pts[t + 1])
            parts.append(
                f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y1:.2f}" '
                f'stroke="rgb({shade},{shade},{shade})" stroke-width="1.2"/>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def episode_goals(env: EnvConfig, seed: int, episodes: int) -> list:
    """Goal layouts and targets that :func:`rollout_policy` uses for ``seed``."""
    env_seq, _ = np.random.SeedSequence(seed).spawn(2)
    states = [env_reset(env, np.random.default_rng(s)) for s in env_seq.spawn(episodes)]
    return [(s.goals, s.target) for s in states]
