"""Experiment configuration: one flat record holding every tunable of the pipeline."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

RUN_MODES = (
    "dream_rnd",
    "dream_deep",
    "dream_val",
    "dream_mixture",
    "dream_none",
    "offline",
)

# Night-phase augmentation selected by each run mode.
AUGMENTATION_BY_MODE = {
    "dream_rnd": "random_swing",
    "dream_deep": "deep_dream",
    "dream_val": "value_diversify",
    "dream_mixture": "mixture",
    "dream_none": "none",
}

# Per-environment shaping defaults: (failure penalty, reward scale).
ENV_SHAPING = {
    "builtin-sparse": (-10.0, 1.0),
    "builtin-dense": (0.0, 1.0),
    "coinrun": (-10.0, 1.0),
    "caveflyer": (-10.0, 1.0),
    "chaser": (0.0, 25.0),
    "plunder": (0.0, 1.0),
}


class ConfigError(ValueError):
    """A configuration value (or combination) is outside its contract."""


@dataclass
class ExperimentConfig:
    # Run selection
    run_mode: str = "dream_rnd"
    env: str = "builtin-sparse"
    seed: int = 0

    # Latent space and networks
    categoricals: int = 32
    classes: int = 32
    rnn_units: int = 512
    units: int = 512
    mlp_layers: int = 2
    conv_filters: tuple = (32, 64, 128, 256)
    deconv_filters: tuple = (128, 64, 32, 3)
    conv_kernel: int = 4
    conv_stride: int = 2
    image_size: int = 64
    unimix: float = 0.01
    unimix_prior: bool = True

    # Reward/return encoding
    bins: int = 255
    bin_low: float = -20.0
    bin_high: float = 20.0

    # World-model loss
    beta_dyn: float = 0.5
    beta_rep: float = 0.1
    free_bits: float = 1.0

    # Agent loss
    critic_scale: float = 0.5
    entropy_scale: float = 0.001
    clip_epsilon: float = 0.2
    ppo_iterations: int = 4
    gamma_day: float = 0.99
    lam: float = 0.95
    adv_decay: float = 0.99
    night_continue: str = "soft"  # predicted continue as soft discount, or "hard" mask

    # Optimization
    lr_day: float = 5e-4
    lr_night: float = 1e-4
    grad_clip: float = 0.5

    # Training schedule
    seed_episodes: int = 5
    day_epochs: int = 200
    wm_updates: int = 20
    day_steps: int = 5000
    world_batch: int = 100
    sequence_length: int = 25
    night_epochs: int = 200
    agent_updates: int = 26
    dream_batch: int = 12
    horizon: int = 16
    test_repetitions: int = 5
    parallel_envs: int = 5

    # Replay
    priority_fraction: float = 0.5

    # Reward shaping (None resolves to the per-environment default)
    failure_penalty: float | None = None
    reward_scale: float | None = None

    # Dream augmentations
    p_swing: float = 0.5
    deepdream_steps: int = 10
    deepdream_step_size: float = 0.1
    value_steps: int = 10
    value_step_size: float = 0.5
    eps_dream: float | None = None  # None -> 1 / horizon

    # Built-in environment
    train_levels: int = 200
    max_episode_steps: int = 64
    grid_size: int = 8

    # Bookkeeping
    checkpoint_every: int = 10
    stop_after_epochs: int | None = None

    @property
    def gamma_night(self) -> float:
        return 1.0 - 1.0 / self.horizon

    @property
    def eps_dream_value(self) -> float:
        return 1.0 / self.horizon if self.eps_dream is None else self.eps_dream

    @property
    def augmentation(self) -> str:
        return AUGMENTATION_BY_MODE.get(self.run_mode, "none")

    def env_key(self) -> str:
        name = self.env
        if name.startswith("procgen:"):
            name = name.split(":", 1)[1]
        return name

    def resolved_failure_penalty(self) -> float:
        if self.failure_penalty is not None:
            return self.failure_penalty
        return ENV_SHAPING.get(self.env_key(), (0.0, 1.0))[0]

    def resolved_reward_scale(self) -> float:
        if self.reward_scale is not None:
            return self.reward_scale
        return ENV_SHAPING.get(self.env_key(), (0.0, 1.0))[1]

    def validate(self) -> None:
        """Check every field; raise one ConfigError listing all problems."""
        problems = []

        def need(cond, msg):
            if not cond:
                problems.append(msg)

        need(self.run_mode in RUN_MODES, f"run_mode must be one of {RUN_MODES}, got {self.run_mode!r}")
        need(self.seed >= 0, "seed must be non-negative")
        for name in ("categoricals", "classes", "rnn_units", "units", "mlp_layers",
                     "conv_kernel", "conv_stride", "image_size", "seed_episodes",
                     "day_epochs", "wm_updates", "day_steps", "world_batch",
                     "night_epochs", "agent_updates", "dream_batch", "horizon",
                     "test_repetitions", "parallel_envs", "ppo_iterations",
                     "train_levels", "max_episode_steps", "grid_size", "checkpoint_every"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        need(self.bins >= 2, "bins must be >= 2")
        need(self.bin_low < self.bin_high, "bin_low must be below bin_high")
        need(self.sequence_length >= 2, "sequence_length must be >= 2")
        need(len(self.conv_filters) >= 1, "conv_filters must be non-empty")
        need(len(self.deconv_filters) >= 1, "deconv_filters must be non-empty")
        need(self.deconv_filters[-1] == 3, "deconv_filters must end with the 3 image channels")
        need(self.image_size % (2 ** len(self.conv_filters)) == 0,
             "image_size must be divisible by 2^len(conv_filters)")
        need(len(self.conv_filters) == len(self.deconv_filters),
             "conv_filters and deconv_filters must have matching depth")
        need(0.0 <= self.unimix < 1.0, "unimix must be in [0, 1)")
        need(0.0 < self.clip_epsilon < 1.0, "clip_epsilon must be in (0, 1)")
        need(0.0 <= self.gamma_day <= 1.0, "gamma_day must be in [0, 1]")
        need(0.0 <= self.lam <= 1.0, "lam must be in [0, 1]")
        need(0.0 < self.adv_decay < 1.0, "adv_decay must be in (0, 1)")
        need(self.night_continue in ("soft", "hard"), "night_continue must be 'soft' or 'hard'")
        need(self.free_bits >= 0.0, "free_bits must be non-negative")
        for name in ("beta_dyn", "beta_rep", "critic_scale", "entropy_scale",
                     "lr_day", "lr_night", "grad_clip"):
            need(getattr(self, name) >= 0.0, f"{name} must be non-negative")
        need(0.0 <= self.p_swing <= 1.0, "p_swing must be in [0, 1]")
        need(self.deepdream_steps >= 0, "deepdream_steps must be >= 0")
        need(self.value_steps >= 0, "value_steps must be >= 0")
        if self.eps_dream is not None:
            need(0.0 <= self.eps_dream <= 1.0, "eps_dream must be in [0, 1]")
        need(0.0 <= self.priority_fraction <= 1.0, "priority_fraction must be in [0, 1]")
        need(self.day_steps % self.parallel_envs == 0,
             "day_steps must be divisible by parallel_envs")
        if self.failure_penalty is not None:
            need(self.failure_penalty <= 0.0, "failure_penalty must be <= 0")
        if self.reward_scale is not None:
            need(self.reward_scale > 0.0, "reward_scale must be > 0")
        if self.stop_after_epochs is not None:
            need(self.stop_after_epochs >= 1, "stop_after_epochs must be >= 1")

        if problems:
            raise ConfigError("invalid configuration:\n" + "\n".join(f"- {p}" for p in problems))

    @classmethod
    def desk(cls, **overrides) -> "ExperimentConfig":
        """Desk-scale preset: small networks and short schedule for CPU smoke runs."""
        base = dict(
            env="builtin-sparse",
            train_levels=20,
            max_episode_steps=48,
            categoricals=8,
            classes=8,
            rnn_units=64,
            units=64,
            conv_filters=(8, 16, 24, 32),
            deconv_filters=(24, 16, 8, 3),
            day_epochs=20,
            day_steps=500,
            wm_updates=4,
            world_batch=8,
            sequence_length=8,
            night_epochs=20,
            agent_updates=4,
            dream_batch=6,
            horizon=16,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["conv_filters"] = list(self.conv_filters)
        out["deconv_filters"] = list(self.deconv_filters)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("conv_filters", "deconv_filters"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        """Load a flat key/value JSON document mirroring this record."""
        with open(path) as f:
            data = json.load(f)
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a flat key/value object")
        return cls.from_dict(data)

    def replaced(self, **overrides) -> "ExperimentConfig":
        return dataclasses.replace(self, **overrides)


def named_generator(seed: int, label: str) -> torch.Generator:
    """Independent torch RNG stream derived from (seed, label)."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    gen = torch.Generator()
    gen.manual_seed(int.from_bytes(digest[:8], "little") % (2**63))
    return gen
