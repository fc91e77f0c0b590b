"""Latent dynamics model: recurrent core, discrete posterior/prior, reward,
continue, and image heads, plus the combined sequence-training loss."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError, ExperimentConfig
from .encodings import BucketSpec, symexp, symlog, two_hot_encode, two_hot_decode

CHECKPOINT_VERSION = 1


@dataclass
class LatentState:
    """Deterministic recurrent vector h plus one-hot categorical matrix z."""

    h: torch.Tensor  # (..., rnn_units)
    z: torch.Tensor  # (..., categoricals, classes)

    def features(self) -> torch.Tensor:
        return torch.cat([self.h, self.z.flatten(-2)], dim=-1)

    def detach(self) -> "LatentState":
        return LatentState(self.h.detach(), self.z.detach())

    def __getitem__(self, index) -> "LatentState":
        return LatentState(self.h[index], self.z[index])


@dataclass
class WorldModelLossReport:
    pred_image: float
    pred_reward: float
    pred_continue: float
    dyn_kl: float
    rep_kl: float
    total: float


@dataclass
class LossTrace:
    """Values captured at one loss evaluation so the identical surrogate can be
    re-evaluated under perturbed parameters (finite-difference checks see the
    same function autograd differentiates through the stop-gradients)."""

    onehots: list
    st_refs: list
    post_refs: list
    prior_refs: list
    h_refs: list


def sample_onehot(probs: torch.Tensor, rng: torch.Generator | None = None,
                  uniforms: torch.Tensor | None = None) -> torch.Tensor:
    """Draw a one-hot sample per leading index of probs (..., classes)."""
    if uniforms is None:
        uniforms = torch.rand(probs.shape[:-1], generator=rng, dtype=probs.dtype)
    cdf = probs.cumsum(-1)
    idx = (uniforms.unsqueeze(-1) >= cdf).sum(-1).clamp(max=probs.shape[-1] - 1)
    return F.one_hot(idx, probs.shape[-1]).to(probs.dtype)


def categorical_kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """KL(p || q) in nats, summed over the categorical axes (..., C, J) -> (...)."""
    return (p * (torch.log(p) - torch.log(q))).sum(dim=(-2, -1))


class MLP(nn.Module):
    """Dense trunk: `layers` x (Linear, LayerNorm, SiLU), then a linear head."""

    def __init__(self, in_dim: int, out_dim: int, units: int, layers: int = 2,
                 zero_head: bool = False):
        super().__init__()
        trunk = []
        dim = in_dim
        for _ in range(layers):
            trunk += [nn.Linear(dim, units), nn.LayerNorm(units), nn.SiLU()]
            dim = units
        self.trunk = nn.Sequential(*trunk)
        self.head = nn.Linear(dim, out_dim)
        if zero_head:
            # Heads start at the symmetric point: uniform policy/bins, zero reward.
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x):
        return self.head(self.trunk(x))


class ConvEncoder(nn.Module):
    """Strided conv stack over channels-last images; halves resolution per layer."""

    def __init__(self, filters, kernel: int, image_size: int, in_channels: int = 3):
        super().__init__()
        pad = (kernel - 2) // 2  # keeps out = in / 2 for stride 2
        layers = []
        ch = in_channels
        for out_ch in filters:
            layers.append(nn.Conv2d(ch, out_ch, kernel, stride=2, padding=pad))
            ch = out_ch
        self.convs = nn.ModuleList(layers)
        self.final_hw = image_size // (2 ** len(filters))
        self.out_dim = filters[-1] * self.final_hw**2

    def activations(self, obs: torch.Tensor) -> torch.Tensor:
        """Post-activation output of the last conv layer, (B, C, H', W')."""
        x = obs.permute(0, 3, 1, 2)
        for conv in self.convs:
            x = F.silu(conv(x))
        return x

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return self.activations(obs).flatten(1)


class ConvDecoder(nn.Module):
    """Mirror of the encoder: linear projection then strided deconvs back to an image."""

    def __init__(self, in_dim: int, filters, kernel: int, image_size: int, base_channels: int):
        super().__init__()
        self.base_hw = image_size // (2 ** len(filters))
        self.base_channels = base_channels
        self.project = nn.Linear(in_dim, base_channels * self.base_hw**2)
        pad = (kernel - 2) // 2
        layers = []
        ch = base_channels
        for out_ch in filters:
            layers.append(nn.ConvTranspose2d(ch, out_ch, kernel, stride=2, padding=pad))
            ch = out_ch
        self.deconvs = nn.ModuleList(layers)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        x = self.project(feat)
        x = x.reshape(-1, self.base_channels, self.base_hw, self.base_hw)
        for i, deconv in enumerate(self.deconvs):
            x = deconv(x)
            if i < len(self.deconvs) - 1:
                x = F.silu(x)
        return x.permute(0, 2, 3, 1)


class WorldModel(nn.Module):
    """Six-component latent dynamics model over 64x64x3 observations."""

    def __init__(self, cfg: ExperimentConfig, action_count: int):
        super().__init__()
        self.cfg = cfg
        self.action_count = action_count
        self.categoricals = cfg.categoricals
        self.classes = cfg.classes
        self.rnn_units = cfg.rnn_units
        self.buckets = BucketSpec(cfg.bins, cfg.bin_low, cfg.bin_high)

        latent_dim = cfg.categoricals * cfg.classes
        feat_dim = cfg.rnn_units + latent_dim

        self.conv = ConvEncoder(cfg.conv_filters, cfg.conv_kernel, cfg.image_size)
        self.encoder_mlp = MLP(cfg.rnn_units + self.conv.out_dim, latent_dim,
                               cfg.units, cfg.mlp_layers, zero_head=True)
        self.prior_mlp = MLP(cfg.rnn_units, latent_dim, cfg.units, cfg.mlp_layers,
                             zero_head=True)
        self.gru_embed = nn.Sequential(
            nn.Linear(latent_dim + action_count, cfg.units),
            nn.LayerNorm(cfg.units),
            nn.SiLU(),
        )
        self.cell = nn.GRUCell(cfg.units, cfg.rnn_units)
        self.reward_mlp = MLP(feat_dim, cfg.bins, cfg.units, cfg.mlp_layers, zero_head=True)
        self.continue_mlp = MLP(feat_dim, 1, cfg.units, cfg.mlp_layers, zero_head=True)
        self.decoder = ConvDecoder(feat_dim, cfg.deconv_filters, cfg.conv_kernel,
                                   cfg.image_size, cfg.conv_filters[-1])

    # --- probability machinery -------------------------------------------------

    def _mix(self, logits: torch.Tensor, is_prior: bool) -> torch.Tensor:
        probs = F.softmax(logits.reshape(*logits.shape[:-1], self.categoricals, self.classes), dim=-1)
        ratio = self.cfg.unimix
        if ratio > 0 and (not is_prior or self.cfg.unimix_prior):
            probs = (1.0 - ratio) * probs + ratio / self.classes
        return probs

    def posterior_probs(self, h: torch.Tensor, obs: torch.Tensor) -> torch.Tensor:
        expected = (self.cfg.image_size, self.cfg.image_size, 3)
        if tuple(obs.shape[-3:]) != expected:
            raise ValueError(f"observation shape {tuple(obs.shape[-3:])} != {expected}")
        emb = self.conv(obs)
        logits = self.encoder_mlp(torch.cat([h, emb], dim=-1))
        return self._mix(logits, is_prior=False)

    def prior_probs(self, h: torch.Tensor) -> torch.Tensor:
        return self._mix(self.prior_mlp(h), is_prior=True)

    @staticmethod
    def straight_through(onehot: torch.Tensor, probs: torch.Tensor,
                         ref: torch.Tensor | None = None) -> torch.Tensor:
        # Forward is exactly the one-hot (the residual is computed first and is
        # exactly zero when ref is the detached probs); backward follows probs.
        return onehot + (probs - (probs.detach() if ref is None else ref))

    # --- model interface -----------------------------------------------------------

    def recurrent_step(self, state: LatentState, action: torch.Tensor) -> torch.Tensor:
        """h' = f(h, z, a) through the gated recurrent cell."""
        if action.shape[-1] != self.action_count:
            raise ValueError(f"action dimension {action.shape[-1]} != {self.action_count}")
        inp = torch.cat([state.z.flatten(-2), action], dim=-1)
        return self.cell(self.gru_embed(inp), state.h)

    def encode(self, h: torch.Tensor, obs: torch.Tensor,
               rng: torch.Generator | None = None):
        """Posterior probs and a straight-through one-hot sample given (h, o)."""
        probs = self.posterior_probs(h, obs)
        onehot = sample_onehot(probs, rng)
        return probs, self.straight_through(onehot, probs)

    def predict_transition(self, h: torch.Tensor, rng: torch.Generator | None = None):
        """Prior probs and a straight-through one-hot sample given h only."""
        probs = self.prior_probs(h)
        onehot = sample_onehot(probs, rng)
        return probs, self.straight_through(onehot, probs)

    def predict_reward(self, state: LatentState):
        """Softmax over buckets and its decoded scalar reward."""
        probs = F.softmax(self.reward_mlp(state.features()), dim=-1)
        value = symexp(two_hot_decode(probs, self.buckets))
        return probs, value

    def predict_continue(self, state: LatentState) -> torch.Tensor:
        return torch.sigmoid(self.continue_mlp(state.features())).squeeze(-1)

    def decode_mean(self, state: LatentState) -> torch.Tensor:
        """Mean image of the observation distribution, (B, H, W, 3)."""
        return self.decoder(state.features())

    def conv_activations(self, obs: torch.Tensor) -> torch.Tensor:
        """Last conv layer activation of the encoder, for activation maximization."""
        return self.conv.activations(obs)

    def blank_state(self, batch: int, dtype=None) -> LatentState:
        dtype = dtype or next(self.parameters()).dtype
        h = torch.zeros(batch, self.rnn_units, dtype=dtype)
        z = torch.zeros(batch, self.categoricals, self.classes, dtype=dtype)
        return LatentState(h, z)

    # --- training loss -----------------------------------------------------------

    def loss(self, batch, rng: torch.Generator | None = None,
             trace: LossTrace | None = None):
        """Sequence loss over a (B, L) window batch.

        Returns (parts, report, trace): differentiable loss terms, their float
        summary, and the trace of stop-gradient reference values. Passing a
        previous trace re-evaluates the identical surrogate (used by gradient
        oracles); otherwise references are the current detached values.
        """
        obs, actions, rewards, continues = (
            batch.observations, batch.actions, batch.rewards, batch.continues)
        B, L = obs.shape[0], obs.shape[1]
        if L < 2:
            raise ConfigError("world model training needs sequences of length >= 2")

        frozen = trace is not None
        out_trace = trace if frozen else LossTrace([], [], [], [], [])
        dtype = next(self.parameters()).dtype

        state = self.blank_state(B, dtype)
        action = torch.zeros(B, self.action_count, dtype=dtype)
        image_terms, reward_terms, continue_terms = [], [], []
        dyn_rows, rep_rows = [], []

        for t in range(L):
            h = self.recurrent_step(state, action)
            post = self.posterior_probs(h, obs[:, t])
            if frozen:
                h_ref = out_trace.h_refs[t]
                onehot = out_trace.onehots[t]
                st_ref = out_trace.st_refs[t]
                post_ref = out_trace.post_refs[t]
                prior_ref = out_trace.prior_refs[t]
                prior = self.prior_probs(h_ref)
            else:
                h_ref = h.detach()
                prior = self.prior_probs(h_ref)
                onehot = sample_onehot(post.detach(), rng)
                st_ref = post.detach()
                post_ref = post.detach()
                prior_ref = prior.detach()
                out_trace.h_refs.append(h_ref)
                out_trace.onehots.append(onehot)
                out_trace.st_refs.append(st_ref)
                out_trace.post_refs.append(post_ref)
                out_trace.prior_refs.append(prior_ref)

            z = self.straight_through(onehot, post, st_ref)
            state = LatentState(h, z)
            feat = state.features()

            image = self.decoder(feat)
            image_terms.append(((image - obs[:, t]) ** 2).mean())

            if t >= 1:
                # Targets follow the (o_t, a_t, r_{t+1}, c_{t+1}) storage layout.
                target = two_hot_encode(symlog(rewards[:, t - 1].double()), self.buckets)
                log_probs = F.log_softmax(self.reward_mlp(feat), dim=-1)
                reward_terms.append(-(target.to(dtype) * log_probs).sum(-1).mean())
                cont_logit = self.continue_mlp(feat).squeeze(-1)
                continue_terms.append(
                    F.binary_cross_entropy_with_logits(cont_logit, continues[:, t - 1]))

            # Prior conditioned on detached h: the dynamics term reaches only the
            # transition predictor, the representation term only the encoder side.
            dyn_rows.append(categorical_kl(post_ref, prior))
            rep_rows.append(categorical_kl(post, prior_ref))
            action = actions[:, t]

        free = self.cfg.free_bits
        pred_image = torch.stack(image_terms).sum()
        pred_reward = torch.stack(reward_terms).sum()
        pred_continue = torch.stack(continue_terms).sum()
        dyn_kl = torch.stack(dyn_rows).clamp(min=free).mean()
        rep_kl = torch.stack(rep_rows).clamp(min=free).mean()
        total = (pred_image + pred_reward + pred_continue
                 + self.cfg.beta_dyn * dyn_kl + self.cfg.beta_rep * rep_kl)

        parts = {
            "pred_image": pred_image,
            "pred_reward": pred_reward,
            "pred_continue": pred_continue,
            "dyn_kl": dyn_kl,
            "rep_kl": rep_kl,
            "total": total,
        }
        report = WorldModelLossReport(
            pred_image.item(), pred_reward.item(), pred_continue.item(),
            dyn_kl.item(), rep_kl.item(), total.item())
        return parts, report, out_trace


def world_model_update(model: WorldModel, optimizer: torch.optim.Optimizer,
                       batch, rng: torch.Generator | None = None) -> WorldModelLossReport:
    """One gradient step on the sequence loss with global-norm clipping."""
    optimizer.zero_grad()
    parts, report, _ = model.loss(batch, rng)
    parts["total"].backward()
    nn.utils.clip_grad_norm_(model.parameters(), model.cfg.grad_clip)
    optimizer.step()
    return report


# --- checkpoint archive -----------------------------------------------------------


def save_checkpoint(path, components: dict, config: ExperimentConfig,
                    extra: dict | None = None) -> None:
    """Write one archive holding parameter arrays keyed by component name."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "components": {
            name: (mod.state_dict() if isinstance(mod, nn.Module) else mod)
            for name, mod in components.items()
        },
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    data = torch.load(path, map_location="cpu", weights_only=False)
    version = data.get("version")
    if version is None:
        raise ValueError(f"{path}: checkpoint is missing its version field")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    return data


def parameter_digest(module: nn.Module) -> str:
    """Stable hash of all parameters, for frozen-model assertions."""
    digest = hashlib.sha256()
    for name, param in sorted(module.named_parameters()):
        digest.update(name.encode())
        digest.update(param.detach().cpu().numpy().tobytes())
    return digest.hexdigest()
