"""Command line: ``acg gen-demos | train | eval | sweep | metrics``.

Exit codes: 0 ok, 1 usage error, 2 data or format error, 3 numerical failure.
``--config file.json`` overrides any flag by its long name (dashes or
underscores both accepted).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import harness
from .checkpoint import load_checkpoint, save_checkpoint
from .data import FormatError, load_dataset, save_dataset
from .flow_match import NonFiniteLossError, TrainConfig, train
from .guidance import GuidanceMethod, SamplerConfig
from .policy_net import NetConfig, NonFiniteError, PolicyNet, ShapeError
from .toyworld import EnvConfig, NoiseConfig, dataset_atv, generate_dataset

log = logging.getLogger("acg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip()]


def _add_env(p):
    g = p.add_argument_group("environment")
    g.add_argument("--goals", type=int, default=3)
    g.add_argument("--radius", type=float, default=0.04)
    g.add_argument("--hold", type=int, default=5)
    g.add_argument("--max-steps", type=int, default=120)
    g.add_argument("--max-speed", type=float, default=0.08)


def _env(args) -> EnvConfig:
    return EnvConfig(
        num_goals=args.goals, success_radius=args.radius, hold_steps=args.hold,
        max_steps=args.max_steps, max_speed=args.max_speed,
    )


def _add_method(p, multi=False):
    p.add_argument("--method", default="vanilla", help="comma list" if multi else None)
    p.add_argument("--lambda", dest="scale", type=float, default=3.0)
    p.add_argument("--layers", default="middle", help="front, middle, back, count:N or e.g. 3-4-5")
    p.add_argument("--sigma", type=float, default=None, help="WNG noise (default 1.0) or smoothing sigma (default 0.1)")
    p.add_argument("--n", type=int, default=2, help="ensemble size")


def _method(kind: str, args, num_layers: int) -> GuidanceMethod:
    kind = kind.strip().replace("-", "_")
    layers = harness.layer_set(args.layers, num_layers)
    if kind == "vanilla":
        return GuidanceMethod.vanilla()
    if kind == "cfg":
        return GuidanceMethod.cfg(args.scale)
    if kind == "acg":
        return GuidanceMethod.acg(args.scale, layers)
    if kind == "wng":
        return GuidanceMethod.wng(args.scale, 1.0 if args.sigma is None else args.sigma, layers)
    if kind == "incoherent":
        return GuidanceMethod.incoherent(layers)
    if kind == "ensemble":
        return GuidanceMethod.ensemble(args.n)
    if kind == "smooth_action":
        return GuidanceMethod.smooth_action(0.1 if args.sigma is None else args.sigma)
    if kind == "smooth_feature":
        return GuidanceMethod.smooth_feature(0.1 if args.sigma is None else args.sigma, layers)
    raise UsageError(f"unknown method {kind!r}")


def _add_eval_common(p):
    p.add_argument("--ckpt", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--exec-horizon", type=int, default=8)
    p.add_argument("--denoise-steps", type=int, default=16)
    p.add_argument("--window", type=int, default=64, help="approach window for ATV/JerkRMS")
    p.add_argument("--out", default="results.csv")
    p.add_argument("--dump", default=None, help="write trajectories as JSON lines")
    p.add_argument("--latency-out", default=None, help="write median per-chunk latency per method")
    _add_env(p)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="acg", description=__doc__.splitlines()[0])
    p.add_argument("--config", default=None, help="JSON file whose keys override flags")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-demos", help="generate a noisy demonstration dataset")
    g.add_argument("--episodes", type=int, default=200)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", default="demos.bin")
    g.add_argument("--jitter", type=float, default=0.02)
    g.add_argument("--pause-prob", type=float, default=0.02)
    g.add_argument("--jerk-prob", type=float, default=0.5)
    g.add_argument("--jerk-magnitude", type=float, default=0.15)
    g.add_argument("--open-loop", action="store_true", help="corrupt finished clean demos and replay them")
    _add_env(g)

    t = sub.add_parser("train", help="train a policy on a dataset")
    t.add_argument("--demos", required=True)
    t.add_argument("--steps", type=int, default=20000)
    t.add_argument("--seed", type=int, default=1)
    t.add_argument("--out", default="ckpt.bin")
    t.add_argument("--loss-csv", default=None, help="default: loss.csv next to --out")
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--lr", type=float, default=2e-4)
    t.add_argument("--warmup", type=int, default=100)
    t.add_argument("--dropout", type=float, default=0.1, help="instruction dropout probability")
    t.add_argument("--num-layers", type=int, default=8)
    t.add_argument("--hidden", type=int, default=32)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--chunk", type=int, default=16)
    t.add_argument("--mlp-ratio", type=int, default=2)

    e = sub.add_parser("eval", help="roll out methods on a checkpoint")
    _add_eval_common(e)
    _add_method(e, multi=True)
    e.add_argument("--svg", default=None, help="directory for per-method trajectory plots")
    e.add_argument("--svg-episodes", type=int, default=20)

    s = sub.add_parser("sweep", help="grid over guidance scale, layer sets and execution horizon")
    _add_eval_common(s)
    s.add_argument("--method", default="acg", choices=["acg", "wng", "cfg"])
    s.add_argument("--lambdas", default=",".join(f"{x:g}" for x in harness.LAMBDA_GRID))
    s.add_argument("--layer-sets", default="middle", help="semicolon list, e.g. 'front;middle;back;count:2'")
    s.add_argument("--horizons", default=None, help="comma list; default is --exec-horizon")
    s.add_argument("--sigma", type=float, default=1.0)

    m = sub.add_parser("metrics", help="recompute metrics from a trajectory dump")
    m.add_argument("trajectories")
    m.add_argument("--window", type=int, default=64)
    m.add_argument("--out", default=None)
    return p


def _apply_config(args):
    if not args.config:
        return args
    try:
        overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError("descriptor", f"config file {args.config} not found") from None
    except json.JSONDecodeError as exc:
        raise FormatError("descriptor", f"config {args.config}: {exc}") from None
    if not isinstance(overrides, dict):
        raise UsageError("config file must hold a JSON object")
    for key, value in overrides.items():
        dest = "scale" if key == "lambda" else key.replace("-", "_")
        if dest in ("command", "config"):
            continue
        if not hasattr(args, dest):
            raise UsageError(f"config key {key!r} is not a flag of {args.command}")
        setattr(args, dest, value)
    return args


# ---------------------------------------------------------------------------
# commands


def cmd_gen_demos(args) -> int:
    env = _env(args)
    ncfg = NoiseConfig(
        jitter_sigma=args.jitter, pause_prob=args.pause_prob, jerk_prob=args.jerk_prob,
        jerk_magnitude=args.jerk_magnitude, seed=args.seed, closed_loop=not args.open_loop,
    )
    ds = generate_dataset(env, ncfg, args.episodes, seed=args.seed)
    save_dataset(ds, args.out)
    lengths = [len(ep) for ep in ds.episodes]
    print(f"episodes {len(ds)}  mean_length {np.mean(lengths):.2f}  demo_atv {dataset_atv(ds):.6f}  -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = load_dataset(args.demos)
    cfg = NetConfig(
        action_dim=ds.action_dim, obs_dim=ds.obs_dim, vocab=ds.vocab, num_layers=args.num_layers,
        hidden=args.hidden, heads=args.heads, chunk=args.chunk, mlp_ratio=args.mlp_ratio,
    )
    tc = TrainConfig(
        batch_size=args.batch_size, total_steps=args.steps, learning_rate=args.lr,
        warmup_steps=args.warmup, condition_dropout_p=args.dropout, chunk_length=args.chunk, seed=args.seed,
    )
    every = max(args.steps // 20, 1)

    def progress(step, loss):
        if (step + 1) % every == 0:
            log.info("step %d/%d loss %.5f", step + 1, args.steps, loss)

    ckpt, losses = train(ds, PolicyNet(cfg, seed=args.seed), tc, progress)
    save_checkpoint(ckpt, args.out)
    loss_path = args.loss_csv or str(Path(args.out).with_name("loss.csv"))
    harness.write_loss_csv(losses, loss_path)
    if len(losses):
        head, tail = losses[:100].mean(), losses[-100:].mean()
        print(f"steps {len(losses)}  first100 {head:.5f}  last100 {tail:.5f}  -> {args.out}, {loss_path}")
    return EXIT_OK


def _load_net(path):
    ckpt = load_checkpoint(path)
    return ckpt, ckpt.to_net().eval()


def _run_cells(args, cells, net, ckpt, env):
    """cells: list of (method, exec_horizon). Returns rows and trajectories in cell-major order."""
    scfg = SamplerConfig(args.denoise_steps)
    seeds = _ints(args.seeds)
    if not seeds:
        raise UsageError("need at least one seed")
    rows, all_trajs, latency = [], [], []
    for method, horizon in cells:
        method.validate(net.cfg.num_layers)
        if not 1 <= horizon <= net.cfg.chunk:
            raise UsageError(f"execution horizon {horizon} outside [1, {net.cfg.chunk}]")
        for seed in seeds:
            row, trajs = harness.run_cell(
                net, method, seed, args.episodes, horizon, env, scfg, ckpt.action_scale, args.window
            )
            log.info("%s m=%d seed=%d success=%.3f atv=%.5f jerk=%.5f", method.tag, horizon, seed,
                     row.success_rate, row.atv_mean, row.jerk_mean)
            rows.append(row)
            all_trajs.extend(trajs)
        if args.latency_out and method.tag not in dict(latency):
            latency.append((method.tag, harness.measure_chunk_latency(net, method, scfg, env)))
    harness.write_results_csv(rows, args.out)
    if args.dump:
        harness.dump_trajectories(all_trajs, args.dump)
    if args.latency_out:
        harness.write_latency_csv(latency, args.latency_out)
    return rows, all_trajs


def _print_rows(rows):
    print(f"{'method':40s} {'m':>3s} {'seed':>5s} {'success':>8s} {'atv':>10s} {'jerk':>10s}")
    for r in rows:
        print(f"{r.method:40s} {r.exec_horizon:3d} {r.seed:5d} {r.success_rate:8.3f} {r.atv_mean:10.6f} {r.jerk_mean:10.6f}")


def cmd_eval(args) -> int:
    ckpt, net = _load_net(args.ckpt)
    env = _env(args)
    methods = [_method(k, args, net.cfg.num_layers) for k in args.method.split(",")]
    rows, trajs = _run_cells(args, [(m, args.exec_horizon) for m in methods], net, ckpt, env)
    _print_rows(rows)
    if args.svg:
        out_dir = Path(args.svg)
        out_dir.mkdir(parents=True, exist_ok=True)
        seed = _ints(args.seeds)[0]
        goals = harness.episode_goals(env, seed, args.episodes)[: args.svg_episodes]
        for m in methods:
            picked = [t for t in trajs if t.method == m.tag and t.meta["seed"] == seed][: args.svg_episodes]
            name = m.tag.replace(":", "_").replace("=", "")
            (out_dir / f"{name}.svg").write_text(harness.render_svg(picked, goals, env, m.tag), encoding="utf-8")
    return EXIT_OK


def cmd_sweep(args) -> int:
    ckpt, net = _load_net(args.ckpt)
    env = _env(args)
    horizons = _ints(args.horizons) if args.horizons else [args.exec_horizon]
    cells = []
    for layers in str(args.layer_sets).split(";"):
        for scale in _floats(args.lambdas):
            ns = argparse.Namespace(scale=scale, layers=layers, sigma=args.sigma, n=1)
            for h in horizons:
                cells.append((_method(args.method, ns, net.cfg.num_layers), h))
    rows, _ = _run_cells(args, cells, net, ckpt, env)
    _print_rows(rows)
    return EXIT_OK


def cmd_metrics(args) -> int:
    try:
        trajs = harness.load_trajectories(args.trajectories)
    except FileNotFoundError:
        raise FormatError("truncated", f"{args.trajectories} not found") from None
    except harness.TrajectoryFileError as exc:
        raise FormatError("descriptor", str(exc)) from None
    rows = harness.rows_from_dump(trajs, args.window)
    if args.out:
        harness.write_results_csv(rows, args.out)
    _print_rows(rows)
    return EXIT_OK


COMMANDS = {
    "gen-demos": cmd_gen_demos,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "metrics": cmd_metrics,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        args = _apply_config(args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"acg: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, NonFiniteLossError) as exc:
        print(f"acg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ShapeError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"acg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"acg: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
