"""End-to-end training loop: day epochs (world-model updates, on-policy
collection, PPO), night epochs (dream rollouts, PPO) or offline PPO, periodic
evaluation, metrics, checkpointing, and resume."""

from __future__ import annotations

import json
import shutil
import time
from pathlib import Path

import numpy as np
import torch

from . import replay as replay_mod
from .agent import ActorCritic, AdvNormState, PpoBatch, gae, normalize_advantages, ppo_update
from .config import ConfigError, ExperimentConfig, named_generator
from .dreaming import imagine_rollout
from .envs import LevelSampler, ShapingConfig, make_env, shape_reward
from .replay import Episode, ReplayDataset, obs_to_uint8
from .worldmodel import (LatentState, WorldModel, load_checkpoint, parameter_digest,
                         sample_onehot, save_checkpoint, world_model_update)

RNG_STREAMS = ("levels", "eval_levels", "policy", "model", "coins", "eval", "replay")


class MetricsLog:
    """Append-only per-epoch records, mirrored to a line-delimited JSON file."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []

    def write_header(self, header: dict) -> None:
        record = {"record": "run", **header}
        self.records.append(record)
        self._write_line(record)

    def append(self, record: dict) -> None:
        self.records.append(record)
        self._write_line(record)

    def _write_line(self, record: dict) -> None:
        if self.path is None:
            return
        with open(self.path, "a") as f:
            f.write(json.dumps(record) + "\n")
            f.flush()

    def epoch_records(self) -> list[dict]:
        return [r for r in self.records if r.get("record") == "epoch"]

    def header(self) -> dict | None:
        for r in self.records:
            if r.get("record") == "run":
                return r
        return None

    @classmethod
    def load(cls, path: str | Path) -> "MetricsLog":
        log = cls()
        log.path = None  # loaded logs are read-only views
        with open(path) as f:
            for line in f:
                line = line.strip()
                if line:
                    log.records.append(json.loads(line))
        log.path = Path(path)
        return log

    def rewrite(self, records: list[dict]) -> None:
        self.records = list(records)
        with open(self.path, "w") as f:
            for record in self.records:
                f.write(json.dumps(record) + "\n")


class LatentPolicy:
    """Acts on the world model's encoding of the real observation."""

    def __init__(self, model: WorldModel, agent: ActorCritic):
        self.model = model
        self.agent = agent
        self.reset()

    def reset(self) -> None:
        self.state = None
        self.prev_action = None

    def act(self, obs: np.ndarray, rng: torch.Generator) -> int:
        with torch.no_grad():
            if self.state is None:
                self.state = self.model.blank_state(1)
                self.prev_action = torch.zeros(1, self.model.action_count)
            h = self.model.recurrent_step(self.state, self.prev_action)
            obs_t = torch.from_numpy(np.asarray(obs, dtype=np.float32)).unsqueeze(0)
            _, z = self.model.encode(h, obs_t, rng)
            self.state = LatentState(h, z)
            policy = self.agent.policy_forward(self.state.features(), rng)
            self.prev_action = policy.sampled_action
            return int(policy.action_index.item())


def evaluate(policy, env, repetitions: int, rng: torch.Generator) -> float:
    """Mean undiscounted raw return over `repetitions` episodes on fresh levels."""
    if repetitions < 1:
        raise ValueError("evaluation needs at least one episode")
    total = 0.0
    for _ in range(repetitions):
        level = int(torch.randint(2**62, (), generator=rng))
        obs = env.reset(level)
        policy.reset()
        episode_return = 0.0
        while True:
            action = policy.act(obs, rng)
            obs, reward, cont, _ = env.step(action)
            episode_return += reward
            if cont == 0:
                break
        total += episode_return
    return total / repetitions


def encode_sequence(model: WorldModel, obs: torch.Tensor, actions: torch.Tensor,
                    rng: torch.Generator) -> torch.Tensor:
    """Posterior-unrolled latent features for a (B, L) window, h reset at start."""
    B, L = obs.shape[:2]
    state = model.blank_state(B)
    action = torch.zeros(B, model.action_count)
    features = []
    with torch.no_grad():
        for t in range(L):
            h = model.recurrent_step(state, action)
            probs = model.posterior_probs(h, obs[:, t])
            z = sample_onehot(probs, rng)
            state = LatentState(h, z)
            features.append(state.features())
            action = actions[:, t]
    return torch.stack(features, dim=1)


class Collector:
    """Steps parallel environment instances with the latent-state policy and
    turns the transitions into replay episodes and PPO rollout streams."""

    def __init__(self, cfg: ExperimentConfig, model: WorldModel, agent: ActorCritic,
                 envs: list, sampler: LevelSampler, shaping: ShapingConfig,
                 dataset: ReplayDataset, rngs: dict):
        self.cfg = cfg
        self.model = model
        self.agent = agent
        self.envs = envs
        self.sampler = sampler
        self.shaping = shaping
        self.dataset = dataset
        self.rngs = rngs
        n = len(envs)
        self.ctx_h = torch.zeros(n, cfg.rnn_units)
        self.ctx_z = torch.zeros(n, cfg.categoricals, cfg.classes)
        self.partial = [None] * n
        self.raw_returns = [0.0] * n

    def initialize(self) -> None:
        obs = []
        for i, env in enumerate(self.envs):
            o = env.reset(self.sampler.draw(self.rngs["levels"]))
            self.partial[i] = self._fresh_partial(o)
            self.raw_returns[i] = 0.0
            obs.append(o)
        self._advance_contexts(np.stack(obs), torch.zeros(len(self.envs), self.envs[0].action_count),
                               reset_rows=list(range(len(self.envs))))

    @staticmethod
    def _fresh_partial(obs) -> dict:
        return {"obs": [obs_to_uint8(obs)], "actions": [], "rewards": [],
                "continues": [], "log_probs": []}

    def _advance_contexts(self, obs_batch: np.ndarray, prev_actions: torch.Tensor,
                          reset_rows: list) -> None:
        with torch.no_grad():
            if reset_rows:
                idx = torch.tensor(reset_rows)
                self.ctx_h[idx] = 0.0
                self.ctx_z[idx] = 0.0
                prev_actions = prev_actions.clone()
                prev_actions[idx] = 0.0
            h = self.model.recurrent_step(LatentState(self.ctx_h, self.ctx_z), prev_actions)
            obs_t = torch.from_numpy(np.asarray(obs_batch, dtype=np.float32))
            _, z = self.model.encode(h, obs_t, self.rngs["model"])
            self.ctx_h, self.ctx_z = h.detach(), z.detach()

    def run(self, steps: int):
        """Collect exactly `steps` transitions; returns PPO streams and the raw
        returns of episodes completed along the way."""
        n = len(self.envs)
        if steps % n:
            raise ConfigError("collection steps must divide evenly across the envs")
        iters = steps // n
        feats, acts, logps, vals, rews, conts = [], [], [], [], [], []
        completed = []
        for _ in range(iters):
            features = torch.cat([self.ctx_h, self.ctx_z.flatten(-2)], dim=-1)
            with torch.no_grad():
                policy = self.agent.policy_forward(features, self.rngs["policy"])
                value = self.agent.critic_forward(features).value
            obs_next, shaped, cont_bits = [], [], []
            reset_rows = []
            for i, env in enumerate(self.envs):
                action = int(policy.action_index[i])
                obs, reward, cont, success = env.step(action)
                shaped_r = shape_reward(reward, cont, success, self.shaping)
                self.raw_returns[i] += reward
                part = self.partial[i]
                part["obs"].append(obs_to_uint8(obs))
                onehot = np.zeros(env.action_count, dtype=np.uint8)
                onehot[action] = 1
                part["actions"].append(onehot)
                part["rewards"].append(shaped_r)
                part["continues"].append(cont)
                part["log_probs"].append(float(policy.log_prob[i]))
                shaped.append(shaped_r)
                cont_bits.append(cont)
                if cont == 0:
                    self._finalize(i, success)
                    completed.append(self.raw_returns[i])
                    self.raw_returns[i] = 0.0
                    obs = env.reset(self.sampler.draw(self.rngs["levels"]))
                    self.partial[i] = self._fresh_partial(obs)
                    reset_rows.append(i)
                obs_next.append(obs)
            feats.append(features)
            acts.append(policy.action_index)
            logps.append(policy.log_prob)
            vals.append(value)
            rews.append(torch.tensor(shaped, dtype=torch.float32))
            conts.append(torch.tensor(cont_bits, dtype=torch.float32))
            self._advance_contexts(np.stack(obs_next), policy.sampled_action, reset_rows)

        with torch.no_grad():
            bootstrap = self.agent.critic_forward(
                torch.cat([self.ctx_h, self.ctx_z.flatten(-2)], dim=-1)).value
        streams = {
            "features": torch.stack(feats, dim=1),   # (n, T', F)
            "actions": torch.stack(acts, dim=1),
            "log_probs": torch.stack(logps, dim=1),
            "values": torch.stack(vals, dim=1),
            "rewards": torch.stack(rews, dim=0).T.contiguous(),
            "continues": torch.stack(conts, dim=0).T.contiguous(),
            "bootstrap": bootstrap,
        }
        return streams, completed

    def _finalize(self, i: int, success: bool) -> None:
        part = self.partial[i]
        if not part["actions"]:
            return
        self.dataset.append(Episode(
            observations=np.stack(part["obs"]),
            actions=np.stack(part["actions"]),
            rewards=np.asarray(part["rewards"], dtype=np.float32),
            continues=np.asarray(part["continues"], dtype=np.float32),
            success=bool(success),
            log_probs=np.asarray(part["log_probs"], dtype=np.float32),
        ))

    def flush_partials(self) -> None:
        """Store in-progress segments as truncated episodes at an epoch boundary."""
        for i in range(len(self.envs)):
            self._finalize(i, success=False)
            last_obs = self.partial[i]["obs"][-1]
            self.partial[i] = {"obs": [last_obs], "actions": [], "rewards": [],
                               "continues": [], "log_probs": []}

    def state_dict(self) -> dict:
        return {
            "envs": [env.state_dict() for env in self.envs],
            "ctx_h": self.ctx_h,
            "ctx_z": self.ctx_z,
            "partial": self.partial,
            "raw_returns": list(self.raw_returns),
            "levels_used": sorted(self.sampler.used),
        }

    def load_state_dict(self, state: dict) -> None:
        self.ctx_h = state["ctx_h"]
        self.ctx_z = state["ctx_z"]
        self.partial = state["partial"]
        self.raw_returns = list(state["raw_returns"])
        self.sampler.used = set(state["levels_used"])
        for env, env_state in zip(self.envs, state["envs"]):
            env.load_state_dict(env_state)


class Trainer:
    """Owns the full training state; see run() for the phase loop."""

    def __init__(self, cfg: ExperimentConfig, out_dir: str | Path, _fresh: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "checkpoints").mkdir(exist_ok=True)

        self.rngs = {name: named_generator(cfg.seed, name) for name in RNG_STREAMS}
        torch.manual_seed(int(torch.randint(2**62, (), generator=named_generator(cfg.seed, "init"))))

        env_kwargs = dict(max_steps=cfg.max_episode_steps, grid=cfg.grid_size,
                          train_level_count=cfg.train_levels, image_size=cfg.image_size)
        self.envs = []
        for _ in range(cfg.parallel_envs):
            env, spec = make_env(cfg.env, **env_kwargs)
            self.envs.append(env)
        self.env_spec = spec
        self.eval_env, _ = make_env(cfg.env, **env_kwargs)
        self.shaping = ShapingConfig(cfg.resolved_failure_penalty(), cfg.resolved_reward_scale())
        self.train_sampler = LevelSampler(cfg.train_levels, full_distribution=False)

        self.model = WorldModel(cfg, self.env_spec.action_count)
        self.agent = ActorCritic(cfg, self.env_spec.action_count)
        self.wm_opt = torch.optim.Adam(self.model.parameters(), lr=cfg.lr_day)
        self.agent_opt = torch.optim.Adam(self.agent.parameters(), lr=cfg.lr_day)

        self.adv_day = AdvNormState(decay=cfg.adv_decay)
        self.adv_night = AdvNormState(decay=cfg.adv_decay)
        self.day_done = 0
        self.night_done = 0
        self.total_env_steps = 0
        self.metrics = MetricsLog(self.out / "metrics.jsonl")

        if _fresh:
            dataset = replay_mod.seed(
                self.envs[0], cfg.seed_episodes, self.rngs["policy"],
                level_fn=lambda: self.train_sampler.draw(self.rngs["levels"]),
                store_dir=self.out / "episodes", shaping=self.shaping)
            self.replay = dataset
            self.total_env_steps = dataset.total_steps
            dataset.set_capacity(dataset.total_steps + cfg.day_epochs * cfg.day_steps)
            self.collector = Collector(cfg, self.model, self.agent, self.envs,
                                       self.train_sampler, self.shaping, dataset, self.rngs)
            self.collector.initialize()
            self.metrics.write_header({
                "env": cfg.env, "run_mode": cfg.run_mode, "seed": cfg.seed,
                "day_epochs": cfg.day_epochs, "night_epochs": cfg.night_epochs,
            })
        else:
            self.replay = None
            self.collector = None

    # --- persistence -------------------------------------------------------------

    def save(self, tag: str) -> Path:
        extra = {
            "day_done": self.day_done,
            "night_done": self.night_done,
            "total_env_steps": self.total_env_steps,
            "adv_day": (self.adv_day.ema_range, self.adv_day.decay),
            "adv_night": (self.adv_night.ema_range, self.adv_night.decay),
            "rng": {name: gen.get_state() for name, gen in self.rngs.items()},
            "episodes_stored": len(self.replay),
            "collector": self.collector.state_dict(),
        }
        components = {
            "worldmodel": self.model,
            "agent": self.agent,
            "wm_optimizer": self.wm_opt.state_dict(),
            "agent_optimizer": self.agent_opt.state_dict(),
        }
        path = self.out / "checkpoints" / f"state_{tag}.pt"
        save_checkpoint(path, components, self.cfg, extra)
        shutil.copyfile(path, self.out / "checkpoints" / "latest.pt")
        return path

    @classmethod
    def resume(cls, path: str | Path, stop_after: int | None = None) -> "Trainer":
        path = Path(path)
        if path.is_dir():
            candidate = path / "checkpoints" / "latest.pt"
            out_dir = path
        else:
            candidate = path
            out_dir = path.parent.parent
        payload = load_checkpoint(candidate)
        cfg = ExperimentConfig.from_dict(payload["config"])
        # The epoch budget governs one invocation only; it never persists.
        cfg = cfg.replaced(stop_after_epochs=stop_after)
        tr = cls(cfg, out_dir, _fresh=False)
        tr.model.load_state_dict(payload["components"]["worldmodel"])
        tr.agent.load_state_dict(payload["components"]["agent"])
        tr.wm_opt.load_state_dict(payload["components"]["wm_optimizer"])
        tr.agent_opt.load_state_dict(payload["components"]["agent_optimizer"])
        extra = payload["extra"]
        tr.day_done = extra["day_done"]
        tr.night_done = extra["night_done"]
        tr.total_env_steps = extra["total_env_steps"]
        tr.adv_day = AdvNormState(*extra["adv_day"])
        tr.adv_night = AdvNormState(*extra["adv_night"])
        for name, state in extra["rng"].items():
            tr.rngs[name].set_state(state)
        tr.replay = ReplayDataset.load(out_dir / "episodes", limit=extra["episodes_stored"])
        tr.replay.set_capacity(tr.replay.total_steps
                               + (cfg.day_epochs - tr.day_done) * cfg.day_steps)
        tr.collector = Collector(cfg, tr.model, tr.agent, tr.envs, tr.train_sampler,
                                 tr.shaping, tr.replay, tr.rngs)
        tr.collector.load_state_dict(extra["collector"])
        # Rewind the metrics file to the checkpointed epoch boundary.
        log = MetricsLog.load(out_dir / "metrics.jsonl")
        kept = [r for r in log.records
                if r.get("record") == "run"
                or (r["phase"] == "day" and r["epoch"] <= tr.day_done)
                or (r["phase"] != "day" and r["epoch"] <= tr.night_done)]
        tr.metrics.rewrite(kept)
        return tr

    # --- epochs --------------------------------------------------------------------

    def _set_lr(self, lr: float) -> None:
        for group in self.agent_opt.param_groups:
            group["lr"] = lr

    def _ppo(self, batch: PpoBatch):
        cfg = self.cfg
        return ppo_update(self.agent, self.agent_opt, batch,
                          iterations=cfg.ppo_iterations, clip=cfg.clip_epsilon,
                          value_scale=cfg.critic_scale, entropy_scale=cfg.entropy_scale,
                          grad_clip=cfg.grad_clip)

    def day_epoch(self) -> dict:
        cfg = self.cfg
        start = time.perf_counter()
        wm_reports = []
        for _ in range(cfg.wm_updates):
            batch = self.replay.sample_sequences(
                cfg.world_batch, cfg.sequence_length, cfg.priority_fraction,
                rng=self.rngs["replay"])
            wm_reports.append(world_model_update(self.model, self.wm_opt, batch,
                                                 self.rngs["model"]))
        streams, completed = self.collector.run(cfg.day_steps)
        self.collector.flush_partials()
        self.total_env_steps += cfg.day_steps

        values_full = torch.cat([streams["values"], streams["bootstrap"].unsqueeze(-1)], dim=-1)
        advantages = gae(streams["rewards"], values_full, streams["continues"],
                         cfg.gamma_day, cfg.lam)
        targets = advantages + streams["values"]
        normalized, self.adv_day = normalize_advantages(advantages.reshape(-1), self.adv_day)
        batch = PpoBatch(
            features=streams["features"].reshape(-1, streams["features"].shape[-1]),
            actions=streams["actions"].reshape(-1),
            old_log_probs=streams["log_probs"].reshape(-1),
            advantages=normalized,
            value_targets=targets.reshape(-1),
        )
        self._set_lr(cfg.lr_day)
        ppo_report = self._ppo(batch)
        test_reward = self.evaluate_test()

        losses = {
            "wm_total": float(np.mean([r.total for r in wm_reports])),
            "wm_image": float(np.mean([r.pred_image for r in wm_reports])),
            "wm_reward": float(np.mean([r.pred_reward for r in wm_reports])),
            "wm_continue": float(np.mean([r.pred_continue for r in wm_reports])),
            "wm_dyn_kl": float(np.mean([r.dyn_kl for r in wm_reports])),
            "wm_rep_kl": float(np.mean([r.rep_kl for r in wm_reports])),
            "ppo_policy": ppo_report.policy_objective,
            "ppo_value": ppo_report.value_loss,
            "ppo_entropy": ppo_report.entropy,
            "ppo_clip_fraction": ppo_report.clip_fraction,
        }
        return {
            "record": "epoch",
            "phase": "day",
            "epoch": self.day_done + 1,
            "train_reward": float(np.mean(completed)) if completed else None,
            "test_reward": test_reward,
            "losses": losses,
            "wall_clock": time.perf_counter() - start,
        }

    def night_epoch(self) -> dict:
        cfg = self.cfg
        start = time.perf_counter()
        eps = 0.0 if cfg.run_mode == "dream_none" else cfg.eps_dream_value
        reports, dream_returns = [], []
        for _ in range(cfg.agent_updates):
            dream = imagine_rollout(
                self.model, self.agent, cfg.dream_batch, cfg.horizon,
                self.rngs["model"], self.rngs["policy"], self.rngs["coins"],
                mode=cfg.augmentation, eps_dream=eps, p_swing=cfg.p_swing,
                deepdream_steps=cfg.deepdream_steps,
                deepdream_step_size=cfg.deepdream_step_size,
                value_steps=cfg.value_steps, value_step_size=cfg.value_step_size)
            continues = dream.continues
            if cfg.night_continue == "hard":
                continues = (continues >= 0.5).float()
            values_full = torch.cat([dream.values, dream.final_value.unsqueeze(-1)], dim=-1)
            advantages = gae(dream.rewards, values_full, continues,
                             cfg.gamma_night, cfg.lam)
            targets = advantages + dream.values
            normalized, self.adv_night = normalize_advantages(
                advantages.reshape(-1), self.adv_night)
            batch = PpoBatch(
                features=dream.features().reshape(-1, cfg.rnn_units + cfg.categoricals * cfg.classes),
                actions=dream.actions.reshape(-1),
                old_log_probs=dream.log_probs.reshape(-1),
                advantages=normalized,
                value_targets=targets.reshape(-1),
            )
            self._set_lr(cfg.lr_night)
            reports.append(self._ppo(batch))
            dream_returns.append(dream.rewards.sum(-1).mean().item())
        test_reward = self.evaluate_test()
        return {
            "record": "epoch",
            "phase": "night",
            "epoch": self.night_done + 1,
            "train_reward": float(np.mean(dream_returns)),
            "test_reward": test_reward,
            "losses": self._ppo_losses(reports),
            "wall_clock": time.perf_counter() - start,
        }

    def offline_epoch(self) -> dict:
        cfg = self.cfg
        start = time.perf_counter()
        length = cfg.horizon + 1
        reports = []
        for _ in range(cfg.agent_updates):
            batch = self.replay.sample_sequences(
                cfg.dream_batch, length, cfg.priority_fraction, rng=self.rngs["replay"])
            if batch.log_probs is None:
                raise ValueError("offline training needs stored behavior log-probs")
            features = encode_sequence(self.model, batch.observations, batch.actions,
                                       self.rngs["model"])
            with torch.no_grad():
                values = self.agent.critic_forward(
                    features.reshape(-1, features.shape[-1])).value.reshape(features.shape[:2])
            H = cfg.horizon
            advantages = gae(batch.rewards[:, :H], values, batch.continues[:, :H],
                             cfg.gamma_day, cfg.lam)
            targets = advantages + values[:, :H]
            normalized, self.adv_night = normalize_advantages(
                advantages.reshape(-1), self.adv_night)
            ppo_batch = PpoBatch(
                features=features[:, :H].reshape(-1, features.shape[-1]),
                actions=batch.actions[:, :H].argmax(-1).reshape(-1),
                old_log_probs=batch.log_probs[:, :H].reshape(-1),
                advantages=normalized,
                value_targets=targets.reshape(-1),
            )
            self._set_lr(cfg.lr_night)
            reports.append(self._ppo(ppo_batch))
        test_reward = self.evaluate_test()
        return {
            "record": "epoch",
            "phase": "offline",
            "epoch": self.night_done + 1,
            "train_reward": None,
            "test_reward": test_reward,
            "losses": self._ppo_losses(reports),
            "wall_clock": time.perf_counter() - start,
        }

    @staticmethod
    def _ppo_losses(reports) -> dict:
        return {
            "ppo_policy": float(np.mean([r.policy_objective for r in reports])),
            "ppo_value": float(np.mean([r.value_loss for r in reports])),
            "ppo_entropy": float(np.mean([r.entropy for r in reports])),
            "ppo_clip_fraction": float(np.mean([r.clip_fraction for r in reports])),
        }

    def evaluate_test(self) -> float:
        policy = LatentPolicy(self.model, self.agent)
        return evaluate(policy, self.eval_env, self.cfg.test_repetitions, self.rngs["eval"])

    # --- phase loop -------------------------------------------------------------------

    def run(self) -> MetricsLog:
        cfg = self.cfg
        budget = cfg.stop_after_epochs
        ran = 0

        def spent() -> bool:
            return budget is not None and ran >= budget

        while self.day_done < cfg.day_epochs and not spent():
            record = self.day_epoch()
            self.day_done += 1
            ran += 1
            self.metrics.append(record)
            if (self.day_done % cfg.checkpoint_every == 0
                    or self.day_done == cfg.day_epochs or spent()):
                self.save(f"day_{self.day_done:04d}")
        if spent():
            return self.metrics

        night_fn = self.offline_epoch if cfg.run_mode == "offline" else self.night_epoch
        while self.night_done < cfg.night_epochs and not spent():
            record = night_fn()
            self.night_done += 1
            ran += 1
            self.metrics.append(record)
            if (self.night_done % cfg.checkpoint_every == 0
                    or self.night_done == cfg.night_epochs or spent()):
                self.save(f"night_{self.night_done:04d}")
        return self.metrics


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path,
                   resume: str | Path | None = None) -> MetricsLog:
    """Seed replay, run the day phase, then the night (or offline) phase."""
    if resume is not None:
        stop_after = cfg.stop_after_epochs if cfg is not None else None
        trainer = Trainer.resume(resume, stop_after=stop_after)
    else:
        trainer = Trainer(cfg, out_dir)
    return trainer.run()
