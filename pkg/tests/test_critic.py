import numpy as np
import pytest
import torch

from conftest import t
from resmix import critic as C
from resmix.core import ParamMap
from resmix.taskworld import default_suite, generate_demos, h_step_return


def constant_critics(values, d_z=2, chunk=2):
    """Ensemble whose members output fixed constants (zero weights, bias only)."""
    spec = C.CriticSpec(d_z, chunk, (3,), len(values))
    p = ParamMap()
    C.init_critics(p, spec, np.random.default_rng(0))
    with torch.no_grad():
        for k in p.keys():
            p[k].zero_()
        for k, v in enumerate(values):
            p[f"q.{k}.1.b"].fill_(v)
            p[f"qt.{k}.1.b"].fill_(v)
    return p, spec


def test_init_copies_live_into_target():
    spec = C.CriticSpec(3, 2, (4,), 3)
    p = ParamMap()
    C.init_critics(p, spec, np.random.default_rng(1))
    assert len(C.live_keys(p)) == len(C.target_keys(p)) == 3 * 4
    for k in C.live_keys(p):
        assert torch.equal(p[k], p["qt" + k[1:]])
    with pytest.raises(ValueError):
        C.init_critics(ParamMap(), C.CriticSpec(n_critics=1), np.random.default_rng(0))


def test_h_step_return_and_backup_hand_values():
    assert h_step_return([-0.01] * 4, 0.99) == pytest.approx(-0.03940399, abs=1e-12)
    p, spec = constant_critics([2.0, 1.0])
    z, a = torch.zeros(2, 2, dtype=torch.float64), torch.zeros(2, 2, dtype=torch.float64)
    y = C.backup(p, spec, t([-0.03940399, 1.0]), t([0.0, 1.0]), z, a, 0.99, 4)
    # min over members = 1.0; first row bootstraps, terminal row does not
    assert y.tolist() == pytest.approx([-0.03940399 + 0.99 ** 4, 1.0], abs=1e-12)
    assert not y.requires_grad


def test_q_values_clip_actions():
    spec = C.CriticSpec(1, 1, (3,), 2)
    p = ParamMap()
    C.init_critics(p, spec, np.random.default_rng(0))
    z = torch.zeros(1, 1, dtype=torch.float64)
    assert torch.equal(C.q_values(p, spec, z, t([[5.0]])), C.q_values(p, spec, z, t([[0.1]])))


def test_td_loss_hand_value():
    p, spec = constant_critics([1.0, 3.0])
    z, a = torch.zeros(2, 2, dtype=torch.float64), torch.zeros(2, 2, dtype=torch.float64)
    # member errors: (1-2)^2 = 1 and (3-2)^2 = 1
    assert C.td_loss(p, spec, z, a, t([2.0, 2.0])).item() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        C.td_loss(p, spec, z[:0], a[:0], t([]))


def test_calql_hand_example():
    p, spec = constant_critics([0.5, 0.5])
    z, a = torch.zeros(1, 2, dtype=torch.float64), torch.zeros(1, 2, dtype=torch.float64)
    # max(Q(s, a_pi) = 0.5, V_mu = 2.0) - Q(s, a_data) = 1.5
    assert C.calql_reg(p, spec, z, a, a, t([2.0])).item() == pytest.approx(1.5, abs=1e-12)
    # V_mu below Q: the clamp is inactive and the term vanishes
    assert C.calql_reg(p, spec, z, a, a, t([-1.0])).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        C.calql_reg(p, spec, z, a, a, None)
    assert C.calql_reg(p, spec, z[:0], a[:0], a[:0], t([])).item() == 0.0


def test_critic_loss_validation():
    assert C.critic_loss(t(1.0), t(2.0), 0.5).item() == 2.0
    with pytest.raises(ValueError):
        C.critic_loss(t(1.0), t(2.0), -0.1)


def test_polyak_is_exact_contraction():
    spec = C.CriticSpec(2, 2, (4,), 2)
    p = ParamMap()
    C.init_critics(p, spec, np.random.default_rng(0))
    with torch.no_grad():
        for k in C.live_keys(p):
            p[k].add_(1.0)
    before = {k: (p["qt" + k[1:]] - p[k]).clone() for k in C.live_keys(p)}
    C.polyak_update(p, spec, 0.1)
    for k, d in before.items():
        assert torch.allclose(p["qt" + k[1:]] - p[k], 0.9 * d, atol=1e-14)
    C.polyak_update(p, spec, 1.0)
    for k in C.live_keys(p):
        assert torch.equal(p["qt" + k[1:]], p[k])


def test_v_mu_matches_return_to_go():
    ds = generate_demos(default_suite()[:2], 2, 4, seed=0)
    v = C.v_mu_from_demos(ds, 0.9, 4)
    ch = ds.chunks(4)
    rew = ds.rewards[ds.episode_slice(0)]
    assert v[0] == pytest.approx(sum(0.9 ** k * r for k, r in enumerate(rew)), abs=1e-12)
    assert len(v) == len(ch)
