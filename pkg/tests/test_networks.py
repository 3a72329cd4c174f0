"""Encoder, bottleneck estimator, base policy and residual mixture."""

import math

import numpy as np
import pytest
import torch

from conftest import t
from resmix import ib
from resmix import morr as M
from resmix.base_policy import BasePolicySpec, base_policy_fn, predict_chunk, pretrain, stage1_loss
from resmix.core import DiagGaussian, ParamMap, check_gradient
from resmix.encoder import EncoderSpec, encode, init_encoder, init_task_head
from resmix.model import ModelSpec, build_stage1
from resmix.taskworld import default_suite, success_rate


# ---- encoder -----------------------------------------------------------------

@pytest.fixture
def enc():
    spec = EncoderSpec(20, (16, 16), 8, 4, (8,))
    p = ParamMap()
    rng = np.random.default_rng(0)
    init_encoder(p, spec, rng)
    init_task_head(p, spec, rng)
    return p, spec


def test_encoder_shapes_and_unit_embedding(enc, rng):
    p, spec = enc
    obs = t(rng.standard_normal((5, 20)))
    lat = encode(p, spec, obs)
    assert lat.z.shape == (5, 8) and lat.task_emb.shape == (5, 4)
    assert torch.allclose(lat.z, lat.z_mean)
    assert torch.allclose(lat.task_emb.norm(dim=-1), torch.ones(5, dtype=torch.float64), atol=1e-12)
    assert torch.all(lat.z_std > 0)


def test_encoder_sampling_is_seeded(enc, rng):
    p, spec = enc
    obs = t(rng.standard_normal((3, 20)))
    a = encode(p, spec, obs, "sample", np.random.default_rng(5)).z
    b = encode(p, spec, obs, "sample", np.random.default_rng(5)).z
    assert torch.equal(a, b)
    assert not torch.equal(a, encode(p, spec, obs).z)


def test_encoder_rejects_bad_observations(enc):
    p, spec = enc
    with pytest.raises(ValueError):
        encode(p, spec, torch.zeros(2, 19, dtype=torch.float64))
    bad = torch.zeros(2, 20, dtype=torch.float64)
    bad[0, 3] = float("inf")
    with pytest.raises(ValueError):
        encode(p, spec, bad)
    with pytest.raises(ValueError):
        encode(p, spec, torch.zeros(2, 20, dtype=torch.float64), mode="mode")


# ---- DV bound ----------------------------------------------------------------

def test_dv_bound_constant_critic_is_zero():
    assert ib.dv_bound(torch.full((7,), 3.0), torch.full((7,), 3.0)).item() == pytest.approx(0.0, abs=1e-12)


def test_dv_bound_hand_value():
    # mean(pos) = 1, log mean exp([0, ln 3]) = ln 2
    val = ib.dv_bound(t([0.0, 2.0]), t([0.0, math.log(3.0)]))
    assert val.item() == pytest.approx(1.0 - math.log(2.0), abs=1e-12)


def test_dv_bound_validation():
    with pytest.raises(ValueError):
        ib.dv_bound(t([]), t([]))
    with pytest.raises(ValueError):
        ib.dv_bound(t([1.0, 2.0]), t([1.0]))
    x = t(np.zeros((3, 1)))
    with pytest.raises(ValueError):
        ib.permute_pairing(x, x, [0, 0, 1])
    with pytest.raises(ValueError):
        ib.permute_pairing(x[:1], x[:1], [0])


def test_gaussian_mi_values():
    assert ib.gaussian_mi(0.0) == 0.0
    assert ib.gaussian_mi(0.5) == pytest.approx(0.14384103622589045, abs=1e-12)
    assert ib.gaussian_mi(0.9) == pytest.approx(0.8303656034108255, abs=1e-12)


def test_correlated_gaussians_moments():
    x, z = ib.correlated_gaussians(0.6, 40000, seed=1)
    assert np.corrcoef(x[:, 0], z[:, 0])[0, 1] == pytest.approx(0.6, abs=0.01)
    with pytest.raises(ValueError):
        ib.correlated_gaussians(1.0, 10)


def test_ib_penalty_routes_gradients_separately():
    spec = ib.DVCriticSpec(3, 2, (8,))
    p = ParamMap()
    ib.init_dv_critic(p, spec, np.random.default_rng(0))
    x = t(np.random.default_rng(1).standard_normal((6, 3)))
    w = torch.ones(2, dtype=torch.float64, requires_grad=True)
    z = x[:, :2] * w
    perm = [1, 2, 3, 4, 5, 0]
    enc_term, crit_term, bound = ib.ib_penalty(p, spec, x, z, perm, 0.5)
    gw, = torch.autograd.grad(enc_term, w, retain_graph=True)
    assert gw.abs().sum() > 0
    assert all(g is None for g in torch.autograd.grad(enc_term, [p[k] for k in p.keys()], allow_unused=True))
    assert crit_term.item() == pytest.approx(-bound.item())
    assert enc_term.item() == pytest.approx(0.5 * bound.item())
    with pytest.raises(ValueError):
        ib.ib_penalty(p, spec, x, z, perm, -1.0)


def test_mi_estimator_on_independent_pairs_is_near_zero():
    x, z = ib.correlated_gaussians(0.0, 4000, seed=0)
    est, hist = ib.train_mi_estimator(x, z, steps=150, batch=256, seed=0)
    assert len(hist) == 150
    assert abs(est) < 0.1


# ---- base policy -------------------------------------------------------------

def test_predict_chunk_shapes(tiny_model):
    params, spec = tiny_model
    d = predict_chunk(params, spec.pol, torch.zeros(3, spec.pol.d_z, dtype=torch.float64))
    assert d.mean.shape == (3, 8) and d.std.shape == (3, 8)
    with pytest.raises(ValueError):
        predict_chunk(params, spec.pol, torch.zeros(3, spec.pol.d_z + 1, dtype=torch.float64))


def test_stage1_loss_gradient(tiny_model, tiny_demos):
    params, spec = tiny_model
    ch = tiny_demos.chunks()
    obs, act = t(ch.obs[:16]), t(ch.actions[:16])
    perm = np.random.default_rng(0).permutation(16)

    def loss(p):
        return stage1_loss(p, spec.enc, spec.pol, spec.dv, obs, act, 0.1, np.random.default_rng(7), perm)[0]

    keys = params.with_prefix("enc.", "pol.")
    assert check_gradient(loss, params, keys=keys, max_per_key=6) < 1e-4


def test_pretrain_reduces_nll_and_is_deterministic(tiny_cfg, tiny_demos):
    spec = ModelSpec.from_config(tiny_cfg, 8)
    runs = []
    for _ in range(2):
        p = build_stage1(spec, 0)
        hist = pretrain(p, spec.enc, spec.pol, spec.dv, tiny_demos.chunks(), 120, 32, 3e-3, 1e-3, 0.1, seed=0)
        runs.append((p, hist))
    (p1, h1), (p2, h2) = runs
    assert np.mean(h1["bc_nll"][-20:]) < np.mean(h1["bc_nll"][:20])
    assert h1 == h2
    assert all(torch.equal(p1[k], p2[k]) for k in p1.keys())


def test_base_policy_fn_is_clipped_and_deterministic(tiny_model):
    params, spec = tiny_model
    with torch.no_grad():
        params["pol.2.b"][:8] = 5.0
    fn = base_policy_fn(params, spec.enc, spec.pol)
    obs = np.random.default_rng(0).standard_normal((4, 20))
    a = fn(obs)
    assert a.shape == (4, 4, 2) and np.all(a == 0.1)
    r1 = success_rate(fn, default_suite()[:2], 2, seed=1)
    r2 = success_rate(fn, default_suite()[:2], 2, seed=1)
    assert r1 == r2


# ---- routing -----------------------------------------------------------------

def test_route_hand_example():
    out = M.route_logits(t([[2.0, 1.0, 0.0, -1.0]]), 2)
    assert out.indices.tolist() == [[0, 1]]
    assert out.weights[0, 0].item() == pytest.approx(0.7310585786300049, abs=1e-12)
    assert out.weights[0, 1].item() == pytest.approx(0.2689414213699951, abs=1e-12)
    assert out.weights[0, 2:].tolist() == [0.0, 0.0]


def test_route_ties_go_to_lower_index_and_m_equals_n_is_softmax():
    out = M.route_logits(torch.zeros(1, 4, dtype=torch.float64), 2)
    assert out.indices.tolist() == [[0, 1]]
    full = M.route_logits(t([[0.3, -1.0, 2.0]]), 3)
    assert torch.allclose(full.weights, full.probs)
    with pytest.raises(ValueError):
        M.route_logits(torch.zeros(1, 4, dtype=torch.float64), 5)
    with pytest.raises(ValueError):
        M.route_logits(torch.zeros(1, 4, dtype=torch.float64), 0)


def test_route_invariants_randomized(rng):
    logits = t(rng.standard_normal((2000, 8)) * 3)
    for m in (1, 2, 5):
        out = M.route_logits(logits, m)
        assert torch.allclose(out.probs.sum(-1), torch.ones(2000, dtype=torch.float64))
        assert torch.allclose(out.weights.sum(-1), torch.ones(2000, dtype=torch.float64))
        assert torch.all((out.weights > 0).sum(-1) == m)
        sel = torch.gather(out.probs, -1, out.indices)
        assert torch.allclose(out.selected_weights, sel / sel.sum(-1, keepdim=True))


# ---- bounded residual --------------------------------------------------------

def test_bounded_residual_mean_hand_value():
    br = M.BoundedResidual(DiagGaussian.from_log_std(t([1.0]), t([0.0])), 0.1)
    assert br.mean.item() == pytest.approx(0.07615941559557649, abs=1e-15)


def test_log1m_tanh_sq_matches_direct_form():
    u = t(np.linspace(-3, 3, 13))
    assert torch.allclose(M.log1m_tanh_sq(u), torch.log(1 - torch.tanh(u) ** 2), atol=1e-12)
    assert torch.isfinite(M.log1m_tanh_sq(t([40.0, -40.0]))).all()


def test_residual_density_integrates_to_one():
    alpha = 0.05
    xs = np.linspace(-alpha, alpha, 200001)[1:-1]
    dens = M.residual_density(t(xs), t(0.4), t(0.7), alpha).numpy()
    assert np.trapezoid(dens, xs) == pytest.approx(1.0, abs=1e-3)


def test_mix_residual_validation():
    with pytest.raises(ValueError):
        M.mix_residual(torch.ones(2, 3, dtype=torch.float64), torch.ones(2, 2, 4, dtype=torch.float64))


@pytest.fixture
def morr_setup(tiny_model, rng):
    params, spec = tiny_model
    ms = spec.morr
    z = t(rng.standard_normal((6, ms.d_z)))
    e = t(rng.standard_normal((6, ms.d_e)))
    e = e / e.norm(dim=-1, keepdim=True)
    a = t(rng.uniform(-0.1, 0.1, (6, ms.chunk_dim)))
    return params, ms, z, e, a


def test_augmented_action_bound_and_log_prob(morr_setup):
    params, ms, z, e, a = morr_setup
    noise = t(np.random.default_rng(2).standard_normal((6, ms.top_m, ms.chunk_dim)))
    out = M.augmented_action(params, ms, z, e, a, mode="sample", noise=noise)
    assert torch.all(out.delta.abs() < ms.alpha)
    assert torch.allclose(out.action, a + out.delta)
    # independent density: u ~ N(sum w mu, sigma^2 sum w^2), then alpha*tanh
    w = out.router.selected_weights
    mu = M.selected_expert_means(params, ms, out.router, z, a)
    sigma = torch.exp(torch.clamp(M.residual_log_std(params, ms, z, a), -5, 2))
    m = (w.unsqueeze(-1) * mu).sum(1)
    s = sigma * w.pow(2).sum(-1, keepdim=True).sqrt()
    expect = torch.log(M.residual_density(out.delta, m, s, ms.alpha)).sum(-1)
    assert torch.allclose(out.log_prob, expect, atol=1e-6)


def test_mixed_residual_variance_monte_carlo(morr_setup):
    params, ms, z, e, a = morr_setup
    z, e, a = z[:1].repeat(20000, 1), e[:1].repeat(20000, 1), a[:1].repeat(20000, 1)
    out = M.augmented_action(params, ms, z, e, a, np.random.default_rng(0), "sample")
    w = out.router.selected_weights[0]
    sigma = torch.exp(torch.clamp(M.residual_log_std(params, ms, z[:1], a[:1]), -5, 2))[0]
    expect = sigma * w.pow(2).sum().sqrt()
    assert torch.allclose(out.pre_squash.std(0), expect, rtol=0.02)


def test_selected_expert_means_match_per_expert_forward(morr_setup):
    params, ms, z, e, a = morr_setup
    r = M.route(params, ms, e)
    mu = M.selected_expert_means(params, ms, r, z, a)
    for b in range(6):
        for s, i in enumerate(r.indices[b].tolist()):
            ref = M.expert_residual_dist(params, ms, i, z[b:b + 1], a[b:b + 1]).raw.mean[0]
            assert torch.allclose(mu[b, s], ref)
    with pytest.raises(IndexError):
        M.expert_residual_dist(params, ms, ms.n_experts, z, a)


def test_zero_bound_gives_exact_base(morr_setup):
    import dataclasses
    params, ms, z, e, a = morr_setup
    ms0 = dataclasses.replace(ms, alpha=0.0)
    out = M.augmented_action(params, ms0, z, e, a, np.random.default_rng(0))
    assert torch.equal(out.action, a) and torch.equal(out.log_prob, torch.zeros(6, dtype=torch.float64))


# ---- auxiliary losses --------------------------------------------------------

def test_load_balance_hand_values():
    uniform = torch.full((3, 4), 0.25, dtype=torch.float64)
    assert M.load_balance_loss(uniform).item() == pytest.approx(-1.3862943611198906, abs=1e-7)
    half = t([[0.5, 0.5, 0.0, 0.0]])
    assert M.load_balance_loss(half).item() == pytest.approx(-0.6931471605599454, abs=1e-9)
    with pytest.raises(ValueError):
        M.load_balance_loss(torch.zeros(0, 4, dtype=torch.float64))


def test_contrastive_loss_hand_value_and_validation():
    protos = torch.eye(8, dtype=torch.float64)
    emb = torch.zeros(2, 8, dtype=torch.float64)
    # equal logits: cross-entropy is log of the number of classes
    assert M.contrastive_loss(emb, [0, 5], protos, 0.1).item() == pytest.approx(2.0794415416798357, abs=1e-12)
    with pytest.raises(ValueError):
        M.contrastive_loss(emb, [0, 8], protos, 0.1)
    with pytest.raises(ValueError):
        M.contrastive_loss(emb, [0, 1], protos, 0.0)


def test_nearest_prototype():
    protos = torch.eye(3, dtype=torch.float64)
    assert M.nearest_prototype(t([[0.1, 0.9, 0.0], [1.0, 0.0, 0.2]]), protos).tolist() == [1, 0]


def test_init_morr_prototypes_unit_norm(tiny_model):
    params, spec = tiny_model
    assert params[M.PROTO].shape == (spec.morr.n_tasks, spec.morr.d_e)
    assert torch.allclose(params[M.PROTO].norm(dim=-1), torch.ones(spec.morr.n_tasks, dtype=torch.float64))


def test_zero_pretraining_steps_keep_initialization(tiny_cfg, tiny_demos):
    spec = ModelSpec.from_config(tiny_cfg, 8)
    p = build_stage1(spec, 0)
    init = p.copy()
    pretrain(p, spec.enc, spec.pol, spec.dv, tiny_demos.chunks(), 0, 32, 1e-3, 1e-3, 0.1, seed=0)
    assert all(torch.equal(p[k], init[k]) for k in p.keys())
