import numpy as np
import pytest
import torch

from daydream.config import named_generator
from daydream.envs import GridWorld
from daydream.replay import (Episode, EpisodeStore, ReplayCapacityError, ReplayDataset,
                             obs_to_float, obs_to_uint8, seed)


def _episode(length, reward_at=None, obs_value=0, action_count=3, success=False):
    obs = np.full((length + 1, 4, 4, 3), obs_value, dtype=np.uint8)
    actions = np.zeros((length, action_count), dtype=np.uint8)
    actions[:, 0] = 1
    rewards = np.zeros(length, dtype=np.float32)
    if reward_at is not None:
        rewards[reward_at] = 1.0
    continues = np.ones(length, dtype=np.float32)
    continues[-1] = 0.0
    return Episode(obs, actions, rewards, continues, success,
                   log_probs=np.zeros(length, dtype=np.float32))


def test_seed_collects_requested_episode_count():
    env = GridWorld(sparse=True, max_steps=6)
    ds = seed(env, 5, named_generator(0, "seed"), level_fn=lambda: 1)
    assert len(ds) == 5
    assert ds.total_steps == sum(ep.length for ep in ds.episodes)


def test_seed_single_episode_step_count():
    env = GridWorld(sparse=True, max_steps=3)
    # Level 97 places goal away from the start; random actions rarely finish in 3.
    ds = seed(env, 1, named_generator(1, "seed"), level_fn=lambda: 97)
    assert len(ds) == 1
    assert ds.total_steps == ds.episodes[0].length <= 3


def test_seed_actions_are_uniform():
    env = GridWorld(sparse=True, max_steps=500, grid=8)
    ds = seed(env, 40, named_generator(2, "seed"), level_fn=lambda: 11)
    draws = np.concatenate([ep.actions.argmax(-1) for ep in ds.episodes])
    assert len(draws) >= 8000
    counts = np.bincount(draws, minlength=env.action_count)
    expected = len(draws) / env.action_count
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # chi-square critical value at p=0.999 with 4 degrees of freedom
    assert chi2 < 18.47


def test_append_updates_counters_and_index():
    ds = ReplayDataset()
    ds.append(_episode(10))
    assert ds.total_steps == 10
    assert ds.nonzero_index == []
    ds.append(_episode(5, reward_at=2))
    assert ds.total_steps == 15
    assert ds.nonzero_index == [(1, 2)]
    assert len(ds.episodes) == 2
    assert ds.episodes[0].length == 10  # earlier entries untouched


def test_append_rejects_malformed_episodes():
    ds = ReplayDataset()
    ep = _episode(5)
    ep.continues[2] = 0.0  # zero before the end
    with pytest.raises(ValueError):
        ds.append(ep)
    short = _episode(5)
    short.observations = short.observations[:4]
    with pytest.raises(ValueError):
        ds.append(short)


def test_capacity_refuses_silent_eviction():
    ds = ReplayDataset(capacity_steps=12)
    ds.append(_episode(10))
    with pytest.raises(ReplayCapacityError):
        ds.append(_episode(5))
    assert ds.total_steps == 10


def test_sample_shapes_and_episode_containment():
    ds = ReplayDataset()
    for i in range(4):
        ds.append(_episode(12, obs_value=i * 10, action_count=3))
    batch = ds.sample_sequences(16, 5, p_priority=0.0, rng=named_generator(3, "r"))
    assert batch.observations.shape == (16, 5, 4, 4, 3)
    assert batch.actions.shape == (16, 5, 3)
    assert batch.rewards.shape == (16, 5)
    # Windows never straddle episodes: all frames in a window share one marker value.
    flat = batch.observations.reshape(16, -1)
    assert (flat == flat[:, :1]).all()
    markers = batch.episode_indices.float() * 10.0 / 255.0
    assert torch.allclose(flat[:, 0], markers, atol=1e-6)
    for s in batch.starts.tolist():
        assert 0 <= s <= 12 - 5


def test_sampling_is_reproducible():
    ds = ReplayDataset()
    for i in range(3):
        ds.append(_episode(9, reward_at=i, obs_value=i))
    a = ds.sample_sequences(8, 4, 0.5, named_generator(4, "x"))
    b = ds.sample_sequences(8, 4, 0.5, named_generator(4, "x"))
    assert torch.equal(a.observations, b.observations)
    assert torch.equal(a.rewards, b.rewards)
    assert torch.equal(a.starts, b.starts)


def test_sampling_requires_long_enough_episode():
    ds = ReplayDataset()
    ds.append(_episode(4))
    with pytest.raises(ValueError):
        ds.sample_sequences(2, 10, 0.0, named_generator(5, "x"))


def test_priority_sampling_frequency():
    # One nonzero-reward window among four equally long episodes.
    ds = ReplayDataset()
    ds.append(_episode(5, reward_at=2))
    for _ in range(3):
        ds.append(_episode(5))
    n = 10_000
    batch = ds.sample_sequences(n, 5, p_priority=0.5, rng=named_generator(6, "m"))
    hits = (batch.episode_indices == 0).float().mean().item()
    expected = 0.5 * 1.0 + 0.5 * (1.0 / 4.0)  # priority branch + uniform branch
    sigma = (expected * (1 - expected) / n) ** 0.5
    assert abs(hits - expected) <= 3 * sigma + 1e-3


def test_priority_zero_is_plain_uniform():
    ds = ReplayDataset()
    ds.append(_episode(5, reward_at=0))
    ds.append(_episode(5))
    n = 8000
    batch = ds.sample_sequences(n, 5, p_priority=0.0, rng=named_generator(7, "m"))
    hits = (batch.episode_indices == 0).float().mean().item()
    sigma = (0.5 * 0.5 / n) ** 0.5
    assert abs(hits - 0.5) <= 3 * sigma + 1e-3


def test_obs_uint8_round_trip():
    obs = np.round(np.random.default_rng(0).random((4, 4, 3)) * 255) / 255.0
    assert np.array_equal(obs_to_float(obs_to_uint8(obs.astype(np.float32))),
                          obs.astype(np.float32))


def test_episode_store_round_trip(tmp_path):
    store_dir = tmp_path / "episodes"
    ds = ReplayDataset(store_dir=store_dir)
    ds.append(_episode(6, reward_at=1, success=True))
    ds.append(_episode(4))
    loaded = ReplayDataset.load(store_dir)
    assert len(loaded) == 2
    assert loaded.total_steps == ds.total_steps
    assert loaded.nonzero_index == ds.nonzero_index
    for a, b in zip(loaded.episodes, ds.episodes):
        assert np.array_equal(a.observations, b.observations)
        assert np.array_equal(a.actions, b.actions)
        assert np.array_equal(a.rewards, b.rewards)
        assert np.array_equal(a.continues, b.continues)
        assert np.array_equal(a.log_probs, b.log_probs)
        assert a.success == b.success


def test_episode_store_load_limit_truncates(tmp_path):
    store_dir = tmp_path / "episodes"
    ds = ReplayDataset(store_dir=store_dir)
    for i in range(5):
        ds.append(_episode(3, obs_value=i))
    partial = ReplayDataset.load(store_dir, limit=3)
    assert len(partial) == 3
    assert len(EpisodeStore(store_dir)) == 3
    # Appends after a truncating load continue the numbering consistently.
    partial.append(_episode(3, obs_value=9))
    again = ReplayDataset.load(store_dir)
    assert len(again) == 4
    assert again.episodes[3].observations[0, 0, 0, 0] == 9
