"""Command-line front end: train, eval, render, genmaps, gradcheck."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .harness import (GRADCHECK_TOLERANCE, RunConfig, evaluate, load_checkpoint,
                      oracle_policy, random_policy, render_arrows, render_value_pgm,
                      run_gradcheck_suite)
from .planners import VARIANTS
from .trainer import Hyperparams, train
from .world import KINDS, generate, load_map, save_map


def _sizes(text: str):
    return tuple(int(t) for t in text.split(","))


def _dims(text: str):
    a, b = text.lower().split("x")
    return int(a), int(b)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridplan",
                                     description="Differentiable planners on grid worlds.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a planner and write run artifacts")
    p.add_argument("--variant", choices=VARIANTS, default="mvprop")
    p.add_argument("--env", choices=KINDS, default="static")
    p.add_argument("--sizes", type=_sizes, default=(8, 12),
                   help="comma-separated square map sizes, e.g. 8,12")
    p.add_argument("--episodes", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outdir", required=True)
    p.add_argument("--no-curriculum", action="store_true")
    p.add_argument("--curriculum-period", type=int, default=2500)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--eval-sizes", type=_sizes, default=(),
                   help="map sizes for periodic evaluation; default largest training size")
    p.add_argument("--eval-episodes", type=int, default=40)
    p.add_argument("--early-stop", type=float, default=None,
                   help="stop once every periodic greedy win rate reaches this")
    p.add_argument("--keep-best", action="store_true",
                   help="return the checkpoint with the best periodic evaluation")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--n-step", type=int, default=Hyperparams.n_step,
                   help="reward-aggregation window per replayed transition")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--buffer", type=int, default=50000)
    p.add_argument("--update-period", type=int, default=32)
    p.add_argument("--importance-cap", type=float, default=10.0)
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a baseline policy")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--env", choices=KINDS, default="static")
    p.add_argument("--sizes", type=_sizes, default=(12,))
    p.add_argument("--episodes-per-size", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--policy", choices=("greedy", "oracle", "random"), default="greedy")
    p.add_argument("--json", action="store_true", dest="as_json")
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("render", help="render a checkpoint's value map on a map file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--map", required=True, dest="map_path")
    p.add_argument("--out", required=True, help="output PGM path")
    p.add_argument("--arrows", default=None, help="also write greedy-arrow text here")
    p.add_argument("--depth", type=int, default=None)
    p.set_defaults(run=cmd_render)

    p = sub.add_parser("genmaps", help="sample maps to text files")
    p.add_argument("--kind", choices=KINDS, default="static")
    p.add_argument("--dims", type=_dims, default=(12, 12), help="e.g. 12x12")
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outdir", required=True)
    p.set_defaults(run=cmd_genmaps)

    p = sub.add_parser("gradcheck", help="finite-difference check of every building block")
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    p.set_defaults(run=cmd_gradcheck)

    return parser


def cmd_train(args) -> int:
    hp = Hyperparams(lr=args.lr, gamma=args.gamma, n_step=args.n_step,
                     batch_size=args.batch_size,
                     buffer_capacity=args.buffer, update_period=args.update_period,
                     importance_cap=args.importance_cap)
    cfg = RunConfig(variant=args.variant, env_kind=args.env, train_sizes=args.sizes,
                    episodes=args.episodes, seed=args.seed,
                    curriculum=not args.no_curriculum,
                    curriculum_period=args.curriculum_period,
                    eval_every=args.eval_every, eval_sizes=args.eval_sizes,
                    eval_episodes=args.eval_episodes,
                    early_stop_win_rate=args.early_stop, keep_best=args.keep_best,
                    outdir=args.outdir, hyperparams=hp)
    _, rows = train(cfg)
    recent = rows[-min(100, len(rows)):]
    rate = sum(r["win"] for r in recent) / len(recent)
    print(f"trained {len(rows)} episodes; last-{len(recent)} win rate {rate:.3f}; "
          f"artifacts in {cfg.outdir}")
    return 0


def cmd_eval(args) -> int:
    if args.policy == "oracle":
        params, policy = None, oracle_policy()
    elif args.policy == "random":
        params, policy = None, random_policy(args.seed)
    else:
        if not args.checkpoint:
            print("eval: --checkpoint is required for the greedy policy", file=sys.stderr)
            return 2
        params, policy = load_checkpoint(args.checkpoint), None
    report = evaluate(params, args.sizes, args.episodes_per_size, args.seed,
                      env_kind=args.env, policy=policy)
    if args.as_json:
        print(json.dumps(report.to_dict(), sort_keys=True, indent=2))
        return 0
    for s in report.stats:
        extra = "-" if s.mean_extra_steps is None else f"{s.mean_extra_steps:.2f}"
        print(f"size {s.size:>3}  win_rate {s.win_rate:.3f} ({s.wins}/{s.episodes})  "
              f"extra_steps {extra}  reward min/mean/max "
              f"{s.reward_min:.3f}/{s.reward_mean:.3f}/{s.reward_max:.3f}")
    return 0


def cmd_render(args) -> int:
    params = load_checkpoint(args.checkpoint)
    world = load_map(args.map_path)
    with open(args.out, "wb") as fh:
        fh.write(render_value_pgm(params, world, depth=args.depth))
    print(f"wrote {args.out}")
    if args.arrows:
        with open(args.arrows, "w") as fh:
            fh.write(render_arrows(params, world, depth=args.depth))
        print(f"wrote {args.arrows}")
    return 0


def cmd_genmaps(args) -> int:
    os.makedirs(args.outdir, exist_ok=True)
    rng = np.random.default_rng(np.random.PCG64(args.seed))
    dx, dy = args.dims
    for k in range(args.count):
        world = generate(args.kind, (dx, dy), rng)
        path = os.path.join(args.outdir, f"{args.kind}_{dx}x{dy}_{args.seed}_{k:03d}.map")
        save_map(world, path)
        print(path)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck_suite(instances=args.instances, seed=args.seed)
    failed = False
    for name in sorted(results):
        ok = results[name] < args.tolerance
        failed |= not ok
        print(f"{name:24s} max_rel_err {results[name]:.3e}  {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def entry(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.run(args)


if __name__ == "__main__":
    sys.exit(entry())
