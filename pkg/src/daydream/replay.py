"""Episode storage and window sampling for world-model training.

Observations are kept as 8-bit integers and converted to [0, 1] floats at batch
time; sampling can prioritize windows that contain a non-zero reward.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .envs import shape_reward as shaping_fn


class ReplayCapacityError(RuntimeError):
    """The dataset would exceed its configured step budget (no silent eviction)."""


@dataclass
class Episode:
    observations: np.ndarray  # (T+1, H, W, 3) uint8
    actions: np.ndarray       # (T, A) one-hot uint8
    rewards: np.ndarray       # (T,) float32, already shaped
    continues: np.ndarray     # (T,) float32, zero only at the final step
    success: bool
    log_probs: np.ndarray | None = None  # (T,) behavior policy log-probs

    @property
    def length(self) -> int:
        return len(self.rewards)

    def validate(self) -> None:
        T = self.length
        if len(self.observations) != T + 1:
            raise ValueError("episode needs T+1 observations for T steps")
        if len(self.actions) != T or len(self.continues) != T:
            raise ValueError("episode arrays have inconsistent lengths")
        if self.log_probs is not None and len(self.log_probs) != T:
            raise ValueError("log_probs length must match step count")
        zero_at = np.flatnonzero(self.continues == 0)
        if zero_at.size and (zero_at.size > 1 or zero_at[0] != T - 1):
            raise ValueError("continue bit may be zero only at the episode end")


@dataclass
class SequenceBatch:
    observations: torch.Tensor  # (B, L, H, W, 3) float32 in [0, 1]
    actions: torch.Tensor       # (B, L, A) float32
    rewards: torch.Tensor       # (B, L)
    continues: torch.Tensor     # (B, L)
    log_probs: torch.Tensor | None = None
    episode_indices: torch.Tensor | None = None
    starts: torch.Tensor | None = None


def obs_to_uint8(obs: np.ndarray) -> np.ndarray:
    return np.rint(np.asarray(obs, dtype=np.float32) * 255.0).astype(np.uint8)


def obs_to_float(obs: np.ndarray) -> np.ndarray:
    return np.asarray(obs, dtype=np.float32) / 255.0


class ReplayDataset:
    """Append-only episode list with uniform or reward-prioritized window sampling."""

    def __init__(self, capacity_steps: int | None = None, store_dir: str | Path | None = None):
        self.episodes: list[Episode] = []
        self.total_steps = 0
        self.nonzero_index: list[tuple[int, int]] = []  # (episode, step) with reward != 0
        self.capacity_steps = capacity_steps
        self.store = EpisodeStore(store_dir) if store_dir else None

    def __len__(self) -> int:
        return len(self.episodes)

    def append(self, episode: Episode) -> None:
        episode.validate()
        if self.capacity_steps is not None and self.total_steps + episode.length > self.capacity_steps:
            raise ReplayCapacityError(
                f"appending {episode.length} steps would exceed capacity {self.capacity_steps}")
        idx = len(self.episodes)
        self.episodes.append(episode)
        self.total_steps += episode.length
        for t in np.flatnonzero(episode.rewards != 0.0):
            self.nonzero_index.append((idx, int(t)))
        if self.store is not None:
            self.store.write(idx, episode)

    def set_capacity(self, capacity_steps: int | None) -> None:
        self.capacity_steps = capacity_steps

    def _window_counts(self, length: int) -> list[int]:
        return [max(0, ep.length - length + 1) for ep in self.episodes]

    def sample_sequences(self, batch: int, length: int, p_priority: float = 0.5,
                         rng: torch.Generator | None = None) -> SequenceBatch:
        """Draw `batch` windows of `length` steps, each inside a single episode."""
        counts = self._window_counts(length)
        total = sum(counts)
        if total == 0:
            raise ValueError(f"no stored episode is at least {length} steps long")
        cumulative = np.cumsum(counts)
        priority = [(e, t) for e, t in self.nonzero_index if counts[e] > 0]

        picks = []
        for _ in range(batch):
            use_priority = (
                priority
                and p_priority > 0
                and torch.rand((), generator=rng).item() < p_priority
            )
            if use_priority:
                e, t = priority[int(torch.randint(len(priority), (), generator=rng))]
                lo = max(0, t - length + 1)
                hi = min(t, self.episodes[e].length - length)
                start = lo + int(torch.randint(hi - lo + 1, (), generator=rng))
            else:
                flat = int(torch.randint(total, (), generator=rng))
                e = int(np.searchsorted(cumulative, flat, side="right"))
                start = flat - (int(cumulative[e - 1]) if e else 0)
            picks.append((e, start))

        obs = np.stack([
            obs_to_float(self.episodes[e].observations[s:s + length]) for e, s in picks])
        actions = np.stack([
            self.episodes[e].actions[s:s + length].astype(np.float32) for e, s in picks])
        rewards = np.stack([self.episodes[e].rewards[s:s + length] for e, s in picks])
        continues = np.stack([self.episodes[e].continues[s:s + length] for e, s in picks])
        log_probs = None
        if all(self.episodes[e].log_probs is not None for e, _ in picks):
            log_probs = torch.from_numpy(
                np.stack([self.episodes[e].log_probs[s:s + length] for e, s in picks]))
        return SequenceBatch(
            observations=torch.from_numpy(obs),
            actions=torch.from_numpy(actions),
            rewards=torch.from_numpy(rewards),
            continues=torch.from_numpy(continues),
            log_probs=log_probs,
            episode_indices=torch.tensor([e for e, _ in picks]),
            starts=torch.tensor([s for _, s in picks]),
        )

    @classmethod
    def load(cls, store_dir: str | Path, limit: int | None = None,
             capacity_steps: int | None = None) -> "ReplayDataset":
        store = EpisodeStore(store_dir)
        ds = cls(capacity_steps=capacity_steps)
        for episode in store.read_all(limit):
            ds.append(episode)
        ds.store = store
        store.truncate(len(ds.episodes))
        return ds


def seed(env, count: int, rng: torch.Generator, level_fn=None,
         store_dir: str | Path | None = None, shaping=None) -> ReplayDataset:
    """Fresh dataset holding `count` episodes collected with uniform-random actions.

    Rewards are stored through the same shaping as later collected experience
    when a shaping config is given.
    """
    if count < 1:
        raise ValueError("need at least one seed episode")
    ds = ReplayDataset(store_dir=store_dir)
    action_count = env.action_count
    uniform_logp = -math.log(action_count)
    for _ in range(count):
        level = level_fn() if level_fn else int(torch.randint(2**31, (), generator=rng))
        obs = env.reset(level)
        observations = [obs_to_uint8(obs)]
        actions, rewards, continues = [], [], []
        done = False
        success = False
        while not done:
            a = int(torch.randint(action_count, (), generator=rng))
            obs, reward, cont, success = env.step(a)
            if shaping is not None:
                reward = shaping_fn(reward, cont, success, shaping)
            onehot = np.zeros(action_count, dtype=np.uint8)
            onehot[a] = 1
            observations.append(obs_to_uint8(obs))
            actions.append(onehot)
            rewards.append(reward)
            continues.append(cont)
            done = cont == 0
        ds.append(Episode(
            observations=np.stack(observations),
            actions=np.stack(actions),
            rewards=np.asarray(rewards, dtype=np.float32),
            continues=np.asarray(continues, dtype=np.float32),
            success=bool(success),
            log_probs=np.full(len(actions), uniform_logp, dtype=np.float32),
        ))
    return ds


class EpisodeStore:
    """On-disk mirror: one compressed file per episode plus a metadata index."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.index_path = self.directory / "index.json"
        self._index = []
        if self.index_path.exists():
            with open(self.index_path) as f:
                self._index = json.load(f)

    def _file(self, idx: int) -> Path:
        return self.directory / f"ep_{idx:06d}.npz"

    def write(self, idx: int, episode: Episode) -> None:
        arrays = {
            "observations": episode.observations,
            "actions": episode.actions,
            "rewards": episode.rewards,
            "continues": episode.continues,
        }
        if episode.log_probs is not None:
            arrays["log_probs"] = episode.log_probs
        np.savez_compressed(self._file(idx), **arrays)
        meta = {
            "file": self._file(idx).name,
            "length": episode.length,
            "success": bool(episode.success),
            "nonzero_rewards": int(np.count_nonzero(episode.rewards)),
        }
        if idx < len(self._index):
            self._index[idx] = meta
            self._index = self._index[:idx + 1]
        else:
            self._index.append(meta)
        self._flush_index()

    def read(self, idx: int) -> Episode:
        meta = self._index[idx]
        with np.load(self._file(idx)) as data:
            return Episode(
                observations=data["observations"],
                actions=data["actions"],
                rewards=data["rewards"],
                continues=data["continues"],
                success=meta["success"],
                log_probs=data["log_probs"] if "log_probs" in data else None,
            )

    def read_all(self, limit: int | None = None):
        n = len(self._index) if limit is None else min(limit, len(self._index))
        return [self.read(i) for i in range(n)]

    def truncate(self, count: int) -> None:
        for i in range(count, len(self._index)):
            self._file(i).unlink(missing_ok=True)
        self._index = self._index[:count]
        self._flush_index()

    def _flush_index(self) -> None:
        with open(self.index_path, "w") as f:
            json.dump(self._index, f)

    def __len__(self) -> int:
        return len(self._index)
