import numpy as np
import pytest
import torch

from daydream.config import ConfigError, named_generator
from daydream.encodings import symlog, two_hot_encode
from daydream.replay import SequenceBatch
from daydream.worldmodel import (LatentState, WorldModel, load_checkpoint,
                                 parameter_digest, sample_onehot, save_checkpoint,
                                 world_model_update)
from oracles import mini_config, perturb_heads, random_sequence_batch, tiny_config

ACTIONS = 3


@pytest.fixture()
def mini_model():
    torch.manual_seed(11)
    return WorldModel(mini_config(), action_count=ACTIONS)


def _random_state(model, batch, seed=0):
    gen = torch.Generator().manual_seed(seed)
    h = torch.randn(batch, model.rnn_units, generator=gen)
    idx = torch.randint(model.classes, (batch, model.categoricals), generator=gen)
    z = torch.nn.functional.one_hot(idx, model.classes).float()
    return LatentState(h, z)


def test_recurrent_step_deterministic_and_shaped(mini_model):
    state = _random_state(mini_model, 7)
    action = torch.nn.functional.one_hot(torch.randint(ACTIONS, (7,)), ACTIONS).float()
    out1 = mini_model.recurrent_step(state, action)
    out2 = mini_model.recurrent_step(state, action)
    assert out1.shape == (7, mini_model.rnn_units)
    assert torch.equal(out1, out2)
    assert torch.isfinite(out1).all()


def test_recurrent_step_zero_action_finite(mini_model):
    state = _random_state(mini_model, 4, seed=3)
    h0 = mini_model.recurrent_step(state, torch.zeros(4, ACTIONS))
    assert torch.isfinite(h0).all()


def test_recurrent_step_rejects_wrong_action_width(mini_model):
    state = _random_state(mini_model, 2)
    with pytest.raises(ValueError):
        mini_model.recurrent_step(state, torch.zeros(2, ACTIONS + 1))


def test_encode_sample_is_one_hot_and_floored(mini_model):
    gen = torch.Generator().manual_seed(1)
    h = torch.randn(5, mini_model.rnn_units)
    obs = torch.rand(5, 16, 16, 3)
    probs, z = mini_model.encode(h, obs, gen)
    assert ((z == 0) | (z == 1)).all()
    assert torch.equal(z.sum(-1), torch.ones(5, mini_model.categoricals))
    assert torch.allclose(probs.sum(-1), torch.ones(5, mini_model.categoricals), atol=1e-6)
    assert probs.min().item() >= 0.01 / mini_model.classes - 1e-9


def test_encode_rejects_wrong_image_shape(mini_model):
    with pytest.raises(ValueError):
        mini_model.encode(torch.zeros(2, mini_model.rnn_units), torch.rand(2, 8, 8, 3))


def test_encode_sampling_matches_posterior_frequencies(mini_model):
    perturb_heads(mini_model, scale=0.8, seed=4)
    h = torch.randn(1, mini_model.rnn_units, generator=torch.Generator().manual_seed(2))
    obs = torch.rand(1, 16, 16, 3, generator=torch.Generator().manual_seed(3))
    probs = mini_model.posterior_probs(h, obs)[0]
    n = 10_000
    gen = torch.Generator().manual_seed(5)
    samples = sample_onehot(probs.expand(n, -1, -1), gen)
    freq = samples.mean(0)
    sigma = (probs * (1 - probs) / n).sqrt()
    assert ((freq - probs).abs() <= 3 * sigma + 5e-4).all()


def test_prior_floored_and_deterministic(mini_model):
    perturb_heads(mini_model, scale=0.5, seed=6)
    h = torch.randn(4, mini_model.rnn_units, generator=torch.Generator().manual_seed(7))
    probs1 = mini_model.prior_probs(h)
    probs2 = mini_model.prior_probs(h)
    assert torch.equal(probs1, probs2)
    assert probs1.min().item() >= 0.01 / mini_model.classes - 1e-9
    gen = torch.Generator().manual_seed(8)
    _, z = mini_model.predict_transition(h, gen)
    assert ((z == 0) | (z == 1)).all()
    assert torch.equal(z.sum(-1), torch.ones(4, mini_model.categoricals))


def test_reward_head_uniform_at_init_decodes_to_zero(mini_model):
    state = _random_state(mini_model, 6, seed=9)
    probs, value = mini_model.predict_reward(state)
    assert torch.allclose(probs, torch.full_like(probs, 1.0 / mini_model.cfg.bins))
    assert value.abs().max().item() < 1e-5


def test_reward_head_overfits_single_transition(mini_model):
    state = _random_state(mini_model, 1, seed=10)
    features = state.features()
    target = two_hot_encode(symlog(torch.tensor([10.0], dtype=torch.float64)),
                            mini_model.buckets).float()
    opt = torch.optim.Adam(mini_model.reward_mlp.parameters(), lr=1e-2)
    for _ in range(300):
        opt.zero_grad()
        log_probs = torch.log_softmax(mini_model.reward_mlp(features), dim=-1)
        loss = -(target * log_probs).sum()
        loss.backward()
        opt.step()
    _, value = mini_model.predict_reward(state)
    assert value.item() == pytest.approx(10.0, abs=0.5)


def test_continue_head_range_and_overfit():
    for target, check in ((1.0, lambda p: p > 0.99), (0.0, lambda p: p < 0.01)):
        torch.manual_seed(12)
        model = WorldModel(mini_config(), action_count=ACTIONS)
        state = _random_state(model, 8, seed=13)
        probs = model.predict_continue(state)
        assert ((probs >= 0) & (probs <= 1)).all()
        labels = torch.full((8,), target)
        opt = torch.optim.Adam(model.continue_mlp.parameters(), lr=1e-2)
        for _ in range(300):
            opt.zero_grad()
            logits = model.continue_mlp(state.features()).squeeze(-1)
            loss = torch.nn.functional.binary_cross_entropy_with_logits(logits, labels)
            loss.backward()
            opt.step()
        assert check(model.predict_continue(state).mean().item())


def test_decoder_shape_and_overfit(mini_model):
    state = _random_state(mini_model, 8, seed=14)
    image = mini_model.decode_mean(state)
    assert image.shape == (8, 16, 16, 3)
    assert torch.isfinite(image).all()

    # Eight solid-color frames, one per state.
    colors = torch.rand(8, 1, 1, 3, generator=torch.Generator().manual_seed(15))
    targets = colors.expand(8, 16, 16, 3).contiguous()
    params = list(mini_model.decoder.parameters())
    opt = torch.optim.Adam(params, lr=1e-2)
    for _ in range(500):
        opt.zero_grad()
        loss = ((mini_model.decode_mean(state) - targets) ** 2).mean()
        loss.backward()
        opt.step()
    final = ((mini_model.decode_mean(state) - targets) ** 2).mean().item()
    assert final < 1e-3


def test_loss_rejects_short_sequences(mini_model):
    batch = random_sequence_batch(mini_model.cfg, 2, 1, ACTIONS, seed=16)
    with pytest.raises(ConfigError):
        mini_model.loss(batch)


def test_free_bits_floor_when_posterior_equals_prior():
    # Zero-initialized heads put posterior and prior both at uniform: KL = 0.
    torch.manual_seed(17)
    model = WorldModel(mini_config(), action_count=ACTIONS)
    batch = random_sequence_batch(model.cfg, 2, 3, ACTIONS, seed=18)
    parts, report, _ = model.loss(batch, named_generator(0, "fb"))
    assert report.dyn_kl == 1.0
    assert report.rep_kl == 1.0
    grads = torch.autograd.grad(
        model.cfg.beta_dyn * parts["dyn_kl"] + model.cfg.beta_rep * parts["rep_kl"],
        list(model.parameters()), allow_unused=True, retain_graph=True)
    for g in grads:
        assert g is None or g.abs().max().item() == 0.0


def test_report_total_composition_and_beta_linearity():
    for beta_dyn in (0.5, 1.0):
        torch.manual_seed(19)
        model = WorldModel(mini_config(beta_dyn=beta_dyn, free_bits=0.0), ACTIONS)
        perturb_heads(model, scale=0.4, seed=20)
        batch = random_sequence_batch(model.cfg, 2, 3, ACTIONS, seed=21)
        _, report, _ = model.loss(batch, named_generator(1, "beta"))
        pred = report.pred_image + report.pred_reward + report.pred_continue
        expected = pred + beta_dyn * report.dyn_kl + model.cfg.beta_rep * report.rep_kl
        assert report.total == pytest.approx(expected, rel=1e-6)
        if beta_dyn == 0.5:
            base_contribution = report.total - pred - model.cfg.beta_rep * report.rep_kl
        else:
            assert (report.total - pred - model.cfg.beta_rep * report.rep_kl) == \
                pytest.approx(2 * base_contribution, rel=1e-5)


def test_stop_gradient_split():
    torch.manual_seed(22)
    model = WorldModel(mini_config(free_bits=0.0), ACTIONS)
    perturb_heads(model, scale=0.5, seed=23)
    batch = random_sequence_batch(model.cfg, 2, 4, ACTIONS, seed=24)
    parts, report, _ = model.loss(batch, named_generator(2, "sg"))
    assert report.dyn_kl > 0 and report.rep_kl > 0

    encoder_params = list(model.conv.parameters()) + list(model.encoder_mlp.parameters())
    prior_params = list(model.prior_mlp.parameters())

    dyn_to_encoder = torch.autograd.grad(parts["dyn_kl"], encoder_params,
                                         allow_unused=True, retain_graph=True)
    assert all(g is None or g.abs().max().item() == 0.0 for g in dyn_to_encoder)
    dyn_to_prior = torch.autograd.grad(parts["dyn_kl"], prior_params,
                                       allow_unused=True, retain_graph=True)
    assert any(g is not None and g.abs().max().item() > 0 for g in dyn_to_prior)

    rep_to_prior = torch.autograd.grad(parts["rep_kl"], prior_params,
                                       allow_unused=True, retain_graph=True)
    assert all(g is None or g.abs().max().item() == 0.0 for g in rep_to_prior)
    rep_to_encoder = torch.autograd.grad(parts["rep_kl"], encoder_params,
                                         allow_unused=True, retain_graph=True)
    assert any(g is not None and g.abs().max().item() > 0 for g in rep_to_encoder)


def test_frozen_trace_reproduces_base_loss():
    torch.manual_seed(25)
    model = WorldModel(tiny_config(), action_count=2)
    perturb_heads(model, scale=0.4, seed=26)
    batch = random_sequence_batch(model.cfg, 2, 3, 2, seed=27)
    parts, _, trace = model.loss(batch, named_generator(3, "frozen"))
    with torch.no_grad():
        parts_again, _, _ = model.loss(batch, trace=trace)
    assert parts_again["total"].item() == pytest.approx(parts["total"].item(), abs=1e-7)


def test_loss_decreases_on_fixed_batch():
    torch.manual_seed(28)
    model = WorldModel(mini_config(), action_count=ACTIONS)
    # Eight sequences of solid-color frames with constant rewards: memorizable.
    gen = torch.Generator().manual_seed(29)
    colors = torch.rand(8, 1, 1, 1, 3, generator=gen)
    obs = colors.expand(8, 4, 16, 16, 3).contiguous()
    actions = torch.nn.functional.one_hot(
        torch.randint(ACTIONS, (8, 4), generator=gen), ACTIONS).float()
    rewards = torch.randint(0, 2, (8, 1), generator=gen).float().expand(8, 4).contiguous()
    continues = torch.ones(8, 4)
    continues[:, -1] = 0.0
    batch = SequenceBatch(observations=obs, actions=actions, rewards=rewards,
                          continues=continues)
    # Narrow trunks move logits slowly under Adam; scale the rate to the model.
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    rng = named_generator(4, "fit")
    first = world_model_update(model, opt, batch, rng)
    for _ in range(199):
        last = world_model_update(model, opt, batch, rng)
    assert last.total <= 0.5 * first.total


def test_one_hot_preserved_everywhere(mini_model):
    perturb_heads(mini_model, scale=0.6, seed=30)
    gen = named_generator(5, "onehot")
    h = torch.randn(64, mini_model.rnn_units, generator=torch.Generator().manual_seed(31))
    obs = torch.rand(64, 16, 16, 3, generator=torch.Generator().manual_seed(32))
    _, z_post = mini_model.encode(h, obs, gen)
    _, z_prior = mini_model.predict_transition(h, gen)
    for z in (z_post, z_prior):
        assert ((z == 0) | (z == 1)).all()
        assert torch.equal(z.sum(-1), torch.ones(64, mini_model.categoricals))


def test_unimix_prior_toggle():
    torch.manual_seed(33)
    model = WorldModel(mini_config(unimix_prior=False), action_count=ACTIONS)
    perturb_heads(model, scale=3.0, seed=34)
    h = torch.randn(4, model.rnn_units, generator=torch.Generator().manual_seed(35))
    # Posterior keeps the floor; the prior is allowed to go arbitrarily peaky.
    obs = torch.rand(4, 16, 16, 3, generator=torch.Generator().manual_seed(36))
    post = model.posterior_probs(h, obs)
    assert post.min().item() >= 0.01 / model.classes - 1e-9
    prior = model.prior_probs(h)
    assert prior.min().item() < 0.01 / model.classes


def test_checkpoint_round_trip(tmp_path, mini_model):
    cfg = mini_model.cfg
    path = tmp_path / "model.pt"
    save_checkpoint(path, {"worldmodel": mini_model}, cfg, extra={"note": 1})
    payload = load_checkpoint(path)
    assert payload["config"]["categoricals"] == cfg.categoricals
    assert payload["extra"]["note"] == 1
    torch.manual_seed(99)
    clone = WorldModel(mini_config(), action_count=ACTIONS)
    assert parameter_digest(clone) != parameter_digest(mini_model)
    clone.load_state_dict(payload["components"]["worldmodel"])
    assert parameter_digest(clone) == parameter_digest(mini_model)


def test_checkpoint_version_is_mandatory(tmp_path):
    bad = tmp_path / "bad.pt"
    torch.save({"components": {}}, bad)
    with pytest.raises(ValueError):
        load_checkpoint(bad)
    torch.save({"version": 999, "components": {}}, bad)
    with pytest.raises(ValueError):
        load_checkpoint(bad)
