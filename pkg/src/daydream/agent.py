"""Actor-critic over latent states: clipped-surrogate policy optimization,
lambda-weighted advantage estimation, and percentile-EMA advantage scaling."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import ExperimentConfig
from .encodings import BucketSpec, symexp, symlog, two_hot_decode, two_hot_encode
from .worldmodel import MLP, LatentState, sample_onehot


@dataclass
class PolicyOutput:
    action_probs: torch.Tensor    # (B, A)
    sampled_action: torch.Tensor  # (B, A) one-hot
    action_index: torch.Tensor    # (B,)
    log_prob: torch.Tensor        # (B,)
    entropy: torch.Tensor         # (B,)


@dataclass
class CriticOutput:
    bin_probs: torch.Tensor  # (B, K)
    value: torch.Tensor      # (B,)


@dataclass
class AdvNormState:
    """Exponentially decayed 5th-to-95th percentile range of advantage batches."""

    ema_range: float = 0.0
    decay: float = 0.99


@dataclass
class PpoBatch:
    features: torch.Tensor       # (N, F) latent features, constants for the update
    actions: torch.Tensor        # (N,) long indices
    old_log_probs: torch.Tensor  # (N,) recorded at collection time
    advantages: torch.Tensor     # (N,) already normalized
    value_targets: torch.Tensor  # (N,) held fixed during the update


@dataclass
class PpoReport:
    policy_objective: float
    value_loss: float
    entropy: float
    total: float
    clip_fraction: float


def _as_features(state) -> torch.Tensor:
    if isinstance(state, LatentState):
        return state.features()
    return state


class ActorCritic(nn.Module):
    """Separate policy and value trunks over the concatenated (h, z) features."""

    def __init__(self, cfg: ExperimentConfig, action_count: int,
                 feature_dim: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.action_count = action_count
        self.buckets = BucketSpec(cfg.bins, cfg.bin_low, cfg.bin_high)
        feature_dim = feature_dim or cfg.rnn_units + cfg.categoricals * cfg.classes
        self.actor = MLP(feature_dim, action_count, cfg.units, cfg.mlp_layers, zero_head=True)
        self.critic = MLP(feature_dim, cfg.bins, cfg.units, cfg.mlp_layers, zero_head=True)

    def policy_forward(self, state, rng: torch.Generator | None = None) -> PolicyOutput:
        features = _as_features(state)
        logits = self.actor(features)
        if logits.shape[-1] != self.action_count:
            raise ValueError("actor output does not match the action count")
        probs = F.softmax(logits, dim=-1)
        log_probs = F.log_softmax(logits, dim=-1)
        onehot = sample_onehot(probs, rng)
        index = onehot.argmax(-1)
        return PolicyOutput(
            action_probs=probs,
            sampled_action=onehot,
            action_index=index,
            log_prob=log_probs.gather(-1, index.unsqueeze(-1)).squeeze(-1),
            entropy=-(probs * log_probs).sum(-1),
        )

    def critic_forward(self, state) -> CriticOutput:
        features = _as_features(state)
        probs = F.softmax(self.critic(features), dim=-1)
        value = symexp(two_hot_decode(probs, self.buckets))
        return CriticOutput(bin_probs=probs, value=value)

    def evaluate_actions(self, features: torch.Tensor, actions: torch.Tensor):
        """Log-prob of given actions plus policy entropy, for the surrogate loss."""
        logits = self.actor(features)
        log_probs = F.log_softmax(logits, dim=-1)
        probs = F.softmax(logits, dim=-1)
        logp = log_probs.gather(-1, actions.long().unsqueeze(-1)).squeeze(-1)
        entropy = -(probs * log_probs).sum(-1)
        return logp, entropy


def gae(rewards: torch.Tensor, values: torch.Tensor, continues: torch.Tensor,
        gamma: float, lam: float) -> torch.Tensor:
    """Lambda-weighted advantages over the trailing time axis.

    rewards/continues are (..., T), values (..., T+1); continues[t] pairs with
    rewards[t] and zeroes both the bootstrap and further accumulation.
    """
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError("gamma and lam must lie in [0, 1]")
    T = rewards.shape[-1]
    if values.shape[-1] != T + 1 or continues.shape[-1] != T:
        raise ValueError("gae needs T rewards/continues and T+1 values")
    deltas = rewards + gamma * continues * values[..., 1:] - values[..., :-1]
    advantages = torch.zeros_like(rewards)
    acc = torch.zeros_like(rewards[..., 0])
    for t in range(T - 1, -1, -1):
        acc = deltas[..., t] + gamma * lam * continues[..., t] * acc
        advantages[..., t] = acc
    return advantages


def normalize_advantages(advantages: torch.Tensor, state: AdvNormState):
    """Scale by max(1, EMA of the P95-P5 batch range); order preserved."""
    flat = advantages.reshape(-1)
    if flat.numel() == 0:
        raise ValueError("cannot normalize an empty advantage batch")
    quantiles = torch.quantile(flat.detach().double(), torch.tensor([0.05, 0.95], dtype=torch.float64))
    batch_range = (quantiles[1] - quantiles[0]).item()
    ema = state.decay * state.ema_range + (1.0 - state.decay) * batch_range
    new_state = AdvNormState(ema_range=ema, decay=state.decay)
    return advantages / max(1.0, ema), new_state


def ppo_loss(agent: ActorCritic, batch: PpoBatch, clip: float,
             value_scale: float, entropy_scale: float):
    """Total loss -L_clip + c_v * L_value - c_e * entropy, with diagnostics."""
    logp, entropy = agent.evaluate_actions(batch.features, batch.actions)
    ratio = torch.exp(logp - batch.old_log_probs)
    surrogate = torch.minimum(
        ratio * batch.advantages,
        ratio.clamp(1.0 - clip, 1.0 + clip) * batch.advantages,
    )
    policy_objective = surrogate.mean()

    # Targets are data: gradient reaches only the critic softmax.
    target = two_hot_encode(symlog(batch.value_targets.detach().double()), agent.buckets)
    log_bins = F.log_softmax(agent.critic(batch.features), dim=-1)
    value_loss = -(target.to(log_bins.dtype) * log_bins).sum(-1).mean()

    mean_entropy = entropy.mean()
    total = -policy_objective + value_scale * value_loss - entropy_scale * mean_entropy
    parts = {
        "policy_objective": policy_objective,
        "value_loss": value_loss,
        "entropy": mean_entropy,
        "total": total,
        "clip_fraction": ((ratio - 1.0).abs() > clip).float().mean(),
    }
    return total, parts


def ppo_update(agent: ActorCritic, optimizer: torch.optim.Optimizer, batch: PpoBatch,
               *, iterations: int = 4, clip: float = 0.2, value_scale: float = 0.5,
               entropy_scale: float = 0.001, grad_clip: float = 0.5) -> PpoReport:
    """Run `iterations` full-batch gradient steps on the clipped objective."""
    if batch.old_log_probs is None:
        raise ValueError("ppo_update needs behavior log-probs recorded at collection time")
    sums = dict.fromkeys(
        ("policy_objective", "value_loss", "entropy", "total", "clip_fraction"), 0.0)
    for _ in range(iterations):
        optimizer.zero_grad()
        total, parts = ppo_loss(agent, batch, clip, value_scale, entropy_scale)
        total.backward()
        nn.utils.clip_grad_norm_(agent.parameters(), grad_clip)
        optimizer.step()
        for key in sums:
            sums[key] += parts[key].item()
    return PpoReport(**{key: value / iterations for key, value in sums.items()})
