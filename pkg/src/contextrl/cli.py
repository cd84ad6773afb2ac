"""Command-line front door: train, eval and sweep experiment orchestration.

Intended for scripts and CI. Each command validates its configuration, seeds
everything explicitly, and leaves plain-table artifacts (metrics, adaptation
curves, checkpoints, task sets, an effective-config echo) in the output
directory. The exit status is nonzero on any validation or numerical failure.

The ``CONTEXTRL_OUTPUT_DIR`` environment variable overrides the output
directory from both file and flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import envs, meta, nn


def _seed_dir(base: Path, seed: int) -> Path:
    return base / f"seed{seed}"


def train_one_seed(cfg: cfgmod.ExperimentConfig, seed: int, out: Path,
                   train_tasks, test_tasks) -> dict:
    """One seeded run: metrics, timings, adaptation curve, checkpoint, tasks."""
    sdir = _seed_dir(out, seed)
    sdir.mkdir(parents=True, exist_ok=True)
    mc = cfg.to_meta_config()
    agent, rows, walls = meta.meta_train(mc, train_tasks, test_tasks, seed,
                                         dump_path=sdir / "failure_dump.npz")
    meta.write_metrics(sdir / "metrics.csv", rows)
    meta.write_timings(sdir / "timing.csv", walls)
    curve = meta.meta_test(agent, test_tasks, mc.test_episodes,
                           np.random.default_rng(seed + 1_000_003))
    meta.write_curves(sdir / "curves.csv", curve)
    envs.save_tasks(sdir / "tasks.json", train_tasks, test_tasks, cfg.env.task_seed)
    nn.save_checkpoint(sdir / "checkpoint.npz", agent.named_nets(), seed,
                       extra={"config": cfgmod.config_to_dict(cfg)})
    final = rows[-1]["test_return"] if rows else float("nan")
    return {"seed": seed, "final_test_return": final,
            "curve_mean_final": float(np.mean(curve[:, -1]))}


def run_train(cfg: cfgmod.ExperimentConfig) -> list[dict]:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.echo_config(cfg, out / "config.yaml")
    train_tasks, test_tasks = cfg.env.sample_tasks()
    results = []
    for seed in cfg.seeds:
        results.append(train_one_seed(cfg, seed, out, train_tasks, test_tasks))
        print(f"seed {seed}: final meta-test return "
              f"{results[-1]['final_test_return']:.4f}")
    return results


def run_eval(checkpoint: str, episodes: int | None, output_dir: str | None) -> Path:
    ckpt_path = Path(checkpoint)
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    tasks_path = ckpt_path.parent / "tasks.json"
    if not tasks_path.exists():
        raise FileNotFoundError(f"task set not found next to checkpoint: {tasks_path}")

    # the checkpoint carries its full experiment configuration
    import json

    with np.load(ckpt_path) as data:
        meta_doc = json.loads(bytes(data["__meta__"]).decode())
    cfg = cfgmod.config_from_dict(meta_doc["extra"]["config"])
    seed = meta_doc["seed"]

    train_tasks, test_tasks = envs.load_tasks(tasks_path)[:2]
    mc = cfg.to_meta_config()
    agent = meta.Agent(mc, test_tasks[0].family, np.random.default_rng(seed))
    nn.load_checkpoint(ckpt_path, agent.named_nets())
    n_eps = episodes if episodes is not None else mc.test_episodes
    curve = meta.meta_test(agent, test_tasks, n_eps,
                           np.random.default_rng(seed + 1_000_003))
    out = Path(output_dir) if output_dir else ckpt_path.parent
    out.mkdir(parents=True, exist_ok=True)
    dest = out / "eval_curves.csv"
    meta.write_curves(dest, curve)
    print(f"eval: {curve.shape[0]} tasks x {curve.shape[1]} episodes, "
          f"mean final return {float(np.mean(curve[:, -1])):.4f}")
    return dest


SWEEP_AXES = ("mode", "prior")


def run_sweep(cfg: cfgmod.ExperimentConfig, axis: str, values: list[str]) -> Path:
    """One subdirectory per variant plus a mean/stderr summary table."""
    if axis not in SWEEP_AXES:
        raise cfgmod.ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    if not values:
        raise cfgmod.ConfigError("sweep needs at least one value")
    base_out = Path(cfg.output_dir)
    base_out.mkdir(parents=True, exist_ok=True)
    summary_rows = []
    for value in values:
        variant = dataclasses.replace(cfg, output_dir=str(base_out / value))
        if axis == "mode":
            variant = dataclasses.replace(variant, mode=value)
        else:
            total = variant.latent_specs()[0].total_dim
            lat = dataclasses.replace(variant.latent,
                                      global_blocks=cfgmod.prior_sweep_blocks(value, total))
            variant = dataclasses.replace(variant, latent=lat)
        cfgmod.validate_config(variant)
        results = run_train(variant)
        finals = np.array([r["final_test_return"] for r in results])
        stderr = finals.std(ddof=1) / np.sqrt(len(finals)) if len(finals) > 1 else 0.0
        summary_rows.append((value, float(finals.mean()), float(stderr), len(finals)))
    summary = base_out / "summary.csv"
    with open(summary, "w") as f:
        f.write(f"# contextrl-sweep-v1 axis={axis}\n")
        f.write("variant,mean_final_test_return,stderr,n_seeds\n")
        for row in summary_rows:
            f.write(f"{row[0]},{row[1]!r},{row[2]!r},{row[3]}\n")
    print(f"sweep summary written to {summary}")
    return summary


def _common_overrides(args) -> dict:
    over = {}
    if args.seed:
        over["seeds"] = list(args.seed)
    if args.mode is not None:
        over["mode"] = args.mode
    if args.env is not None:
        over["env.family"] = args.env
    if args.output_dir is not None:
        over["output_dir"] = args.output_dir
    if args.epochs is not None:
        over["epochs"] = args.epochs
    if args.beta is not None:
        over["beta"] = args.beta
    if args.tr is not None:
        over["tr"] = args.tr
    env_dir = os.environ.get("CONTEXTRL_OUTPUT_DIR")
    if env_dir:
        over["output_dir"] = env_dir
    return over


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contextrl",
                                description="train/eval/sweep meta-RL experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", default=None, help="YAML config file")
        sp.add_argument("--seed", type=int, action="append", default=[],
                        help="run seed (repeatable)")
        sp.add_argument("--mode", default=None)
        sp.add_argument("--env", default=None, help="environment family")
        sp.add_argument("--output-dir", default=None)
        sp.add_argument("--epochs", type=int, default=None)
        sp.add_argument("--beta", type=float, default=None)
        sp.add_argument("--tr", type=int, default=None)

    t = sub.add_parser("train", help="train one experiment per seed")
    add_common(t)

    e = sub.add_parser("eval", help="adaptation curves from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=None)
    e.add_argument("--output-dir", default=None)

    s = sub.add_parser("sweep", help="run one variant per value of an axis")
    add_common(s)
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--values", required=True,
                   help="comma-separated variant values")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "eval":
            run_eval(args.checkpoint, args.episodes, args.output_dir)
            return 0
        cfg = cfgmod.parse_config(args.config, _common_overrides(args))
        if args.command == "train":
            run_train(cfg)
        else:
            run_sweep(cfg, args.axis, [v.strip() for v in args.values.split(",") if v.strip()])
        return 0
    except (cfgmod.ConfigError, FileNotFoundError, RuntimeError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
