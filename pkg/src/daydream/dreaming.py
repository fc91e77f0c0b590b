"""Night-phase trajectory generation: random initial latent states, imagination
rollouts driven by the policy, and the three generative state perturbations."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import ConfigError
from .worldmodel import LatentState

AUGMENTATION_KINDS = ("none", "random_swing", "deep_dream", "value_diversify", "mixture")


@dataclass
class DreamBatch:
    """B x H imagined rollout plus the bootstrap value at the final state."""

    h: torch.Tensor            # (B, H, rnn)
    z: torch.Tensor            # (B, H, C, J)
    actions: torch.Tensor      # (B, H) long
    rewards: torch.Tensor      # (B, H) decoded predicted rewards
    continues: torch.Tensor    # (B, H) predicted continue probabilities
    log_probs: torch.Tensor    # (B, H)
    values: torch.Tensor       # (B, H)
    final_value: torch.Tensor  # (B,)
    perturbed: torch.Tensor    # (B, H) bool, True where an augmentation fired

    def features(self) -> torch.Tensor:
        return torch.cat([self.h, self.z.flatten(-2)], dim=-1)


def draw_seed_latent(batch: int, rnn_units: int, categoricals: int, classes: int,
                     rng: torch.Generator | None = None):
    """Standard-normal hidden vector and uniformly drawn one-hot categoricals."""
    h = torch.randn(batch, rnn_units, generator=rng)
    idx = torch.randint(classes, (batch, categoricals), generator=rng)
    z = F.one_hot(idx, classes).float()
    return h, z


def sample_initial_states(model, batch: int, rng: torch.Generator | None = None) -> LatentState:
    """Push a random seed latent through the recurrent step and the prior."""
    with torch.no_grad():
        h_init, z_init = draw_seed_latent(
            batch, model.rnn_units, model.categoricals, model.classes, rng)
        action = torch.zeros(batch, model.action_count)
        h0 = model.recurrent_step(LatentState(h_init, z_init), action)
        _, z0 = model.predict_transition(h0, rng)
    return LatentState(h0.detach(), z0.detach())


def project_to_one_hot(z: torch.Tensor) -> torch.Tensor:
    """Row-wise argmax one-hot; ties resolve to the lowest class index."""
    idx = z.argmax(-1)
    return F.one_hot(idx, z.shape[-1]).to(z.dtype)


def random_swing(state: LatentState, p_swing: float,
                 rng: torch.Generator | None = None) -> LatentState:
    """Add unit noise to h; independently resample each categorical with p_swing."""
    noise = torch.randn(state.h.shape, generator=rng, dtype=state.h.dtype)
    current = state.z.argmax(-1)
    swap = torch.rand(current.shape, generator=rng) < p_swing
    resampled = torch.randint(state.z.shape[-1], current.shape, generator=rng)
    idx = torch.where(swap, resampled, current)
    return LatentState(state.h + noise, F.one_hot(idx, state.z.shape[-1]).to(state.z.dtype))


def deep_dream(state: LatentState, model, steps: int, step_size: float) -> LatentState:
    """Ascend the mean activation of the encoder's last conv layer applied to the
    decoded image, differentiating through decoder and encoder w.r.t. (h, z)."""
    if model is None:
        raise ValueError("deep_dream needs a trained world model")
    if steps <= 0:
        return state
    with torch.enable_grad():
        h = state.h.detach().clone().requires_grad_(True)
        z = state.z.detach().clone().requires_grad_(True)
        for _ in range(steps):
            image = model.decode_mean(LatentState(h, z))
            activation = model.conv_activations(image)
            objective = activation.reshape(activation.shape[0], -1).mean(-1)
            gh, gz = torch.autograd.grad(objective.sum(), [h, z])
            h = (h + step_size * gh).detach().requires_grad_(True)
            z = (z + step_size * gz).detach().requires_grad_(True)
    return LatentState(h.detach(), project_to_one_hot(z.detach()))


def value_diversify(state: LatentState, critic, steps: int, step_size: float) -> LatentState:
    """Ascend the squared change of the critic value relative to the input state.

    The squared difference has an exactly zero gradient at the start point, so
    the first step ascends the value itself; later steps use the stated
    objective. z is re-projected to one-hot after every step.
    """
    if critic is None:
        raise ValueError("value_diversify needs a trained critic")
    if steps <= 0:
        return state
    with torch.enable_grad():
        h = state.h.detach().clone().requires_grad_(True)
        z = state.z.detach().clone().requires_grad_(True)
        v0 = critic.critic_forward(torch.cat([h, z.flatten(-2)], dim=-1)).value.detach()
        for i in range(steps):
            value = critic.critic_forward(torch.cat([h, z.flatten(-2)], dim=-1)).value
            objective = value if i == 0 else (value - v0) ** 2
            gh, gz = torch.autograd.grad(objective.sum(), [h, z])
            h = (h + step_size * gh).detach().requires_grad_(True)
            z = project_to_one_hot((z + step_size * gz).detach()).requires_grad_(True)
    return LatentState(h.detach(), z.detach())


def _augment_rows(state: LatentState, rows: torch.Tensor, kinds: torch.Tensor,
                  model, agent, settings: dict,
                  rng: torch.Generator | None) -> LatentState:
    """Apply the selected perturbation to the given batch rows, grouped by kind."""
    h, z = state.h.clone(), state.z.clone()
    for kind_id, name in ((0, "random_swing"), (1, "deep_dream"), (2, "value_diversify")):
        members = rows[kinds == kind_id]
        if members.numel() == 0:
            continue
        sub = LatentState(state.h[members], state.z[members])
        if name == "random_swing":
            out = random_swing(sub, settings["p_swing"], rng)
        elif name == "deep_dream":
            out = deep_dream(sub, model, settings["deepdream_steps"],
                             settings["deepdream_step_size"])
        else:
            out = value_diversify(sub, agent, settings["value_steps"],
                                  settings["value_step_size"])
        h[members] = out.h
        z[members] = out.z
    return LatentState(h, z)


def imagine_rollout(model, agent, batch: int, horizon: int,
                    rng_model: torch.Generator, rng_policy: torch.Generator,
                    rng_coins: torch.Generator, *, mode: str = "none",
                    eps_dream: float | None = None, p_swing: float = 0.5,
                    deepdream_steps: int = 10, deepdream_step_size: float = 0.1,
                    value_steps: int = 10, value_step_size: float = 0.5) -> DreamBatch:
    """Roll the frozen world model forward for `horizon` steps from random starts.

    With probability eps_dream (default 1/horizon) the current state is perturbed
    before the policy acts on it; the perturbed state also feeds the transition.
    """
    if horizon < 1:
        raise ConfigError("imagination horizon must be >= 1")
    if mode not in AUGMENTATION_KINDS:
        raise ConfigError(f"unknown augmentation mode {mode!r}")
    eps = (1.0 / horizon) if eps_dream is None else eps_dream
    settings = dict(p_swing=p_swing, deepdream_steps=deepdream_steps,
                    deepdream_step_size=deepdream_step_size,
                    value_steps=value_steps, value_step_size=value_step_size)

    hs, zs, actions, rewards, continues, log_probs, values, perturbed = (
        [], [], [], [], [], [], [], [])
    with torch.no_grad():
        state = sample_initial_states(model, batch, rng_model)
        for _ in range(horizon):
            fired = torch.zeros(batch, dtype=torch.bool)
            if mode != "none" and eps > 0:
                fired = torch.rand(batch, generator=rng_coins) < eps
                if fired.any():
                    rows = fired.nonzero(as_tuple=True)[0]
                    if mode == "mixture":
                        kinds = torch.randint(3, (rows.numel(),), generator=rng_coins)
                    else:
                        kind_id = ("random_swing", "deep_dream", "value_diversify").index(mode)
                        kinds = torch.full((rows.numel(),), kind_id)
                    state = _augment_rows(state, rows, kinds, model, agent,
                                          settings, rng_coins)
                    state = state.detach()

            policy = agent.policy_forward(state.features(), rng_policy)
            value = agent.critic_forward(state.features()).value

            h_next = model.recurrent_step(state, policy.sampled_action)
            _, z_next = model.predict_transition(h_next, rng_model)
            next_state = LatentState(h_next.detach(), z_next.detach())
            _, reward = model.predict_reward(next_state)
            cont = model.predict_continue(next_state)

            hs.append(state.h)
            zs.append(state.z)
            actions.append(policy.action_index)
            rewards.append(reward)
            continues.append(cont)
            log_probs.append(policy.log_prob)
            values.append(value)
            perturbed.append(fired)
            state = next_state

        final_value = agent.critic_forward(state.features()).value

    return DreamBatch(
        h=torch.stack(hs, dim=1),
        z=torch.stack(zs, dim=1),
        actions=torch.stack(actions, dim=1),
        rewards=torch.stack(rewards, dim=1),
        continues=torch.stack(continues, dim=1),
        log_probs=torch.stack(log_probs, dim=1),
        values=torch.stack(values, dim=1),
        final_value=final_value,
        perturbed=torch.stack(perturbed, dim=1),
    )
