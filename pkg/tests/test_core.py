import math

import numpy as np
import pytest
import torch

from resmix.core import (AdamState, DiagGaussian, FrozenParameterError, MLPSpec, ParamMap, adam_step, backward,
                         check_gradient, diff_checkpoints, gaussian_log_prob, init_mlp, load_checkpoint, mlp_forward,
                         polyak, sample_gaussian, save_checkpoint)


def one_layer(w, b, act):
    p = ParamMap()
    p.add("net.0.w", np.asarray(w, dtype=float))
    p.add("net.0.b", np.asarray(b, dtype=float))
    return p, MLPSpec((len(w), len(b)), (act,))


# ---- mlp_forward -------------------------------------------------------------

def test_zero_weights_give_zero_output():
    p, spec = one_layer(np.zeros((3, 2)), np.zeros(2), "tanh")
    out = mlp_forward(p, spec, torch.tensor([0.3, -2.0, 5.0], dtype=torch.float64), "net")
    assert torch.equal(out, torch.zeros(2, dtype=torch.float64))


def test_identity_layer_passes_input_through():
    p, spec = one_layer(np.eye(3), np.zeros(3), "identity")
    x = torch.tensor([0.3, -2.0, 5.0], dtype=torch.float64)
    assert torch.equal(mlp_forward(p, spec, x, "net"), x)


def test_scalar_tanh_unit_matches_hand_value():
    p, spec = one_layer([[2.0]], [1.0], "tanh")
    out = mlp_forward(p, spec, torch.tensor([0.5], dtype=torch.float64), "net")
    assert out.item() == pytest.approx(0.9640275800758169, abs=1e-12)


def test_forward_rejects_bad_inputs():
    p, spec = one_layer(np.eye(2), np.zeros(2), "relu")
    with pytest.raises(ValueError):
        mlp_forward(p, spec, torch.zeros(3, dtype=torch.float64), "net")
    with pytest.raises(ValueError):
        mlp_forward(p, spec, torch.tensor([float("nan"), 0.0], dtype=torch.float64), "net")


def test_mlp_spec_validation():
    with pytest.raises(ValueError):
        MLPSpec((3,), ())
    with pytest.raises(ValueError):
        MLPSpec((3, 2), ("softsign",))
    spec = MLPSpec.make(4, (8, 8), 2)
    assert spec.activations == ("tanh", "tanh", "identity")


# ---- ParamMap ----------------------------------------------------------------

def test_param_map_invariants():
    p = ParamMap()
    p.add("a", np.ones(3))
    with pytest.raises(KeyError):
        p.add("a", np.ones(3))
    with pytest.raises(ValueError):
        p.add("b", [np.inf])
    with pytest.raises(ValueError):
        p.assign("a", torch.ones(4, dtype=torch.float64))
    v = p.version
    p.assign("a", torch.zeros(3, dtype=torch.float64))
    assert p.version == v + 1


def test_frozen_entries_reject_writes():
    p = ParamMap()
    p.add("enc.w", np.ones(2))
    p.add("head.w", np.ones(2))
    p.freeze(["enc.w"])
    with pytest.raises(FrozenParameterError):
        p.assign("enc.w", torch.zeros(2, dtype=torch.float64))
    with pytest.raises(FrozenParameterError):
        adam_step(p, {"enc.w": torch.ones(2, dtype=torch.float64)}, AdamState(), 1e-3)
    with pytest.raises(FrozenParameterError):
        p.load_numpy({"enc.w": np.zeros(2)})
    g = backward((p["enc.w"] * p["head.w"]).sum(), p)
    assert torch.equal(g["enc.w"], torch.zeros(2, dtype=torch.float64))


# ---- backward / check_gradient ------------------------------------------------

def test_backward_constant_and_linear():
    p = ParamMap()
    p.add("w", np.array([0.7]))
    g = backward(torch.tensor(4.0, dtype=torch.float64), p)
    assert g["w"].item() == 0.0
    g = backward((p["w"] * 3.0).sum(), p)
    assert g["w"].item() == 3.0


def test_backward_rejects_non_finite_loss():
    p = ParamMap()
    p.add("w", np.array([0.0]))
    with pytest.raises(FloatingPointError):
        backward((p["w"] / 0.0).sum() * 0 + float("inf"), p)


def test_check_gradient_quadratic_and_linear(rng):
    p = ParamMap()
    p.add("w", rng.standard_normal(6))
    assert check_gradient(lambda q: 0.5 * (q["w"] ** 2).sum(), p, eps=1e-5) < 1e-6
    c = torch.as_tensor(rng.standard_normal(6))
    assert check_gradient(lambda q: (q["w"] * c).sum(), p, eps=1e-5) < 1e-8
    with pytest.raises(ValueError):
        check_gradient(lambda q: (q["w"] ** 2).sum(), p, eps=0.1)


def test_check_gradient_random_mlp(rng):
    p = ParamMap()
    spec = MLPSpec.make(3, (5,), 2)
    init_mlp(p, "m", spec, rng)
    x = torch.as_tensor(rng.standard_normal((7, 3)))
    assert check_gradient(lambda q: (mlp_forward(q, spec, x, "m") ** 2).sum(), p) < 1e-4


# ---- Adam --------------------------------------------------------------------

def test_adam_zero_gradient_is_noop():
    p = ParamMap()
    p.add("w", np.array([1.5, -2.0]))
    st = AdamState()
    before = p["w"].clone()
    adam_step(p, {"w": torch.zeros(2, dtype=torch.float64)}, st, 1e-2)
    assert torch.equal(p["w"], before)
    assert st.step == 1


def test_adam_constant_gradient_moves_monotonically():
    p = ParamMap()
    p.add("w", np.array([0.0]))
    st, prev = AdamState(), 0.0
    for _ in range(50):
        adam_step(p, {"w": torch.tensor([2.0], dtype=torch.float64)}, st, 1e-2)
        assert p["w"].item() < prev
        prev = p["w"].item()


def test_adam_converges_on_quadratic():
    p = ParamMap()
    p.add("w", np.array([0.0]))
    st = AdamState()
    for _ in range(5000):
        adam_step(p, backward(((p["w"] - 3.0) ** 2).sum(), p), st, 1e-2)
    assert abs(p["w"].item() - 3.0) < 1e-3


def test_adam_key_mismatch_and_clip():
    p = ParamMap()
    p.add("w", np.array([0.0, 0.0]))
    with pytest.raises(KeyError):
        adam_step(p, {"v": torch.zeros(2, dtype=torch.float64)}, AdamState(), 1e-2)
    with pytest.raises(ValueError):
        adam_step(p, {"w": torch.zeros(2, dtype=torch.float64)}, AdamState(), 0.0)
    # clipping rescales the whole gradient, so the first Adam step is unchanged in sign and size
    adam_step(p, {"w": torch.tensor([300.0, -400.0], dtype=torch.float64)}, AdamState(), 1e-2, max_grad_norm=1.0)
    assert p["w"].detach().numpy() == pytest.approx([-1e-2, 1e-2], rel=1e-5)


# ---- Gaussians ---------------------------------------------------------------

def test_standard_normal_log_prob_at_zero():
    d = DiagGaussian(torch.zeros(1, dtype=torch.float64), torch.ones(1, dtype=torch.float64))
    assert gaussian_log_prob(d, torch.zeros(1, dtype=torch.float64)).item() == pytest.approx(-0.9189385332046727)


def test_log_prob_maximum_and_symmetry(rng):
    mu = torch.as_tensor(rng.standard_normal(4))
    sd = torch.as_tensor(rng.uniform(0.2, 2.0, 4))
    d = DiagGaussian(mu, sd)
    peak = gaussian_log_prob(d, mu).item()
    assert peak == pytest.approx(-2 * math.log(2 * math.pi) - torch.log(sd).sum().item())
    c = torch.as_tensor(rng.standard_normal(4))
    assert gaussian_log_prob(d, mu + c).item() == pytest.approx(gaussian_log_prob(d, mu - c).item(), abs=1e-12)
    assert gaussian_log_prob(d, mu + c).item() < peak


def test_log_prob_rejects_non_positive_std():
    d = DiagGaussian(torch.zeros(2, dtype=torch.float64), torch.tensor([1.0, 0.0], dtype=torch.float64))
    with pytest.raises(ValueError):
        gaussian_log_prob(d, torch.zeros(2, dtype=torch.float64))


def test_log_std_clamp():
    d = DiagGaussian.from_log_std(torch.zeros(2, dtype=torch.float64), torch.tensor([-50.0, 50.0], dtype=torch.float64))
    assert d.std.numpy() == pytest.approx([math.exp(-5), math.exp(2)])


def test_sampling_reparameterized_and_seeded():
    mu = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    sd = torch.full((3,), 0.5, dtype=torch.float64, requires_grad=True)
    s1, n1 = sample_gaussian(DiagGaussian(mu, sd), np.random.default_rng(5))
    s2, _ = sample_gaussian(DiagGaussian(mu, sd), np.random.default_rng(5))
    assert torch.equal(s1, s2)
    s1.sum().backward()
    assert torch.equal(mu.grad, torch.ones(3, dtype=torch.float64))
    assert torch.equal(sd.grad, n1)
    tiny = DiagGaussian.from_log_std(torch.ones(3, dtype=torch.float64), torch.full((3,), -50.0, dtype=torch.float64))
    s, _ = sample_gaussian(tiny, np.random.default_rng(0))
    assert torch.allclose(s, torch.ones(3, dtype=torch.float64), atol=0.05)


def test_sampling_moments():
    d = DiagGaussian(torch.zeros(100_000, dtype=torch.float64), torch.ones(100_000, dtype=torch.float64))
    s, _ = sample_gaussian(d, np.random.default_rng(11))
    assert abs(s.mean().item()) < 0.02
    assert abs(s.var().item() - 1.0) < 0.05


# ---- Polyak / checkpoints -------------------------------------------------------

def test_polyak_contraction(rng):
    p = ParamMap()
    p.add("live", rng.standard_normal(5))
    p.add("tgt", rng.standard_normal(5))
    gap = torch.linalg.vector_norm(p["tgt"] - p["live"]).item()
    polyak(p, p, 0.005, [("tgt", "live")])
    assert torch.linalg.vector_norm(p["tgt"] - p["live"]).item() == pytest.approx(0.995 * gap, rel=1e-12)
    polyak(p, p, 1.0, [("tgt", "live")])
    assert torch.equal(p["tgt"], p["live"])
    with pytest.raises(ValueError):
        polyak(p, p, 0.0, [("tgt", "live")])


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    p = ParamMap()
    p.add("a.0.w", rng.standard_normal((3, 4)))
    p.add("a.0.b", rng.standard_normal(4))
    p.add("scalar", np.array(2.5))
    p.freeze(["a.0.b"])
    save_checkpoint(tmp_path / "x.ckpt", p, seed=17, tag="stage1")
    q, hdr = load_checkpoint(tmp_path / "x.ckpt")
    assert (hdr.version, hdr.seed, hdr.tag) == (1, 17, "stage1")
    assert q.keys() == p.keys() and q.frozen == {"a.0.b"}
    assert diff_checkpoints(p, q) == []
    save_checkpoint(tmp_path / "y.ckpt", q, seed=17, tag="stage1")
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()
    q.assign("a.0.w", q["a.0.w"] + 1e-300)
    assert diff_checkpoints(p, q) in ([], ["a.0.w"])  # sub-ulp change may round away
    q.assign("a.0.w", q["a.0.w"] + 1.0)
    assert diff_checkpoints(p, q) == ["a.0.w"]


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "bad").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")
