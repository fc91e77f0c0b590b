"""Command line entry: train, eval, dream-export, and plot subcommands."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from .agent import ActorCritic
from .config import ConfigError, ExperimentConfig, named_generator
from .dreaming import deep_dream, random_swing, sample_initial_states, value_diversify
from .envs import make_env
from .orchestrator import LatentPolicy, Trainer, evaluate, run_experiment
from .plotting import plot_metrics
from .worldmodel import WorldModel, load_checkpoint


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="daydream")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run the day/night training pipeline")
    train.add_argument("--config", type=Path, help="flat JSON config file")
    train.add_argument("--mode", help="run mode override")
    train.add_argument("--env", help="environment override")
    train.add_argument("--seed", type=int, help="global seed override")
    train.add_argument("--out", type=Path, help="output directory")
    train.add_argument("--resume", type=Path, help="run directory or checkpoint to resume")
    train.add_argument("--stop-after", type=int, dest="stop_after",
                       help="run at most this many epochs, then checkpoint and exit")
    train.add_argument("--desk", action="store_true",
                       help="start from the desk-scale preset instead of full defaults")

    ev = sub.add_parser("eval", help="evaluate a checkpointed agent")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--episodes", type=int, default=5)
    ev.add_argument("--seed", type=int, default=0)

    export = sub.add_parser("dream-export", help="decode dream states to a PNG grid")
    export.add_argument("--checkpoint", type=Path, required=True)
    export.add_argument("--mode", default="mixture",
                        choices=("random_swing", "deep_dream", "value_diversify", "mixture"))
    export.add_argument("--count", type=int, default=4)
    export.add_argument("--out", type=Path, default=Path("dreams.png"))
    export.add_argument("--seed", type=int, default=0)

    plot = sub.add_parser("plot", help="plot metrics logs")
    plot.add_argument("--logs", type=Path, nargs="+", required=True)
    plot.add_argument("--out", type=Path, required=True)
    return parser


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_file(args.config)
    elif args.desk:
        cfg = ExperimentConfig.desk()
    else:
        cfg = ExperimentConfig()
    overrides = {}
    if args.mode is not None:
        overrides["run_mode"] = args.mode
    if args.env is not None:
        overrides["env"] = args.env
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.stop_after is not None:
        overrides["stop_after_epochs"] = args.stop_after
    return cfg.replaced(**overrides) if overrides else cfg


def _restore_models(checkpoint: Path):
    payload = load_checkpoint(checkpoint)
    cfg = ExperimentConfig.from_dict(payload["config"])
    env, spec = make_env(cfg.env, max_steps=cfg.max_episode_steps, grid=cfg.grid_size,
                         train_level_count=cfg.train_levels, image_size=cfg.image_size)
    model = WorldModel(cfg, spec.action_count)
    agent = ActorCritic(cfg, spec.action_count)
    model.load_state_dict(payload["components"]["worldmodel"])
    agent.load_state_dict(payload["components"]["agent"])
    model.eval()
    agent.eval()
    return cfg, env, model, agent


def _cmd_train(args) -> int:
    if args.resume:
        trainer = Trainer.resume(args.resume, stop_after=args.stop_after)
        metrics = trainer.run()
    else:
        cfg = _load_config(args)
        cfg.validate()
        if args.out is None:
            print("train: --out is required for fresh runs", file=sys.stderr)
            return 1
        metrics = run_experiment(cfg, args.out)
    epochs = metrics.epoch_records()
    if epochs:
        print(f"completed {len(epochs)} epochs; last test reward "
              f"{epochs[-1]['test_reward']:.3f}")
    return 0


def _cmd_eval(args) -> int:
    cfg, env, model, agent = _restore_models(args.checkpoint)
    rng = named_generator(args.seed, "cli_eval")
    mean_reward = evaluate(LatentPolicy(model, agent), env, args.episodes, rng)
    print(f"mean reward over {args.episodes} episodes: {mean_reward:.3f}")
    return 0


def _cmd_dream_export(args) -> int:
    from PIL import Image

    cfg, env, model, agent = _restore_models(args.checkpoint)
    rng = named_generator(args.seed, "dream_export")
    states = sample_initial_states(model, args.count, rng)

    variants = [("original", lambda s: s)]
    if args.mode in ("random_swing", "mixture"):
        variants.append(("random_swing", lambda s: random_swing(s, cfg.p_swing, rng)))
    if args.mode in ("deep_dream", "mixture"):
        variants.append(("deep_dream", lambda s: deep_dream(
            s, model, cfg.deepdream_steps, cfg.deepdream_step_size)))
    if args.mode in ("value_diversify", "mixture"):
        variants.append(("value_diversify", lambda s: value_diversify(
            s, agent, cfg.value_steps, cfg.value_step_size)))

    size = cfg.image_size
    grid = np.zeros((args.count * size, len(variants) * size, 3), dtype=np.uint8)
    with torch.no_grad():
        for col, (_, transform) in enumerate(variants):
            images = model.decode_mean(transform(states)).clamp(0.0, 1.0)
            for row in range(args.count):
                grid[row * size:(row + 1) * size, col * size:(col + 1) * size] = (
                    (images[row].numpy() * 255).astype(np.uint8))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid).save(args.out)
    print(f"wrote {args.out} ({args.count} states x {[name for name, _ in variants]})")
    return 0


def _cmd_plot(args) -> int:
    written = plot_metrics(args.logs, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "train": _cmd_train,
        "eval": _cmd_eval,
        "dream-export": _cmd_dream_export,
        "plot": _cmd_plot,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001  (CLI boundary: report and exit 2)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
