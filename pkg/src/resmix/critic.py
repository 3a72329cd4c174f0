"""Chunk-level action-value ensemble with calibrated offline-to-online training."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from .core import MLPSpec, ParamMap, init_mlp, mlp_forward, polyak
from .taskworld import ACTION_MAX, DemoDataset, h_step_return  # noqa: F401  (re-exported)

LIVE = "q"
TARGET = "qt"


@dataclass(frozen=True)
class CriticSpec:
    d_z: int = 32
    chunk_dim: int = 8
    hidden: tuple[int, ...] = (128, 128)
    n_critics: int = 2
    action_bound: float | None = ACTION_MAX

    @property
    def mlp(self) -> MLPSpec:
        return MLPSpec.make(self.d_z + self.chunk_dim, self.hidden, 1)

    def prefix(self, k: int, target: bool = False) -> str:
        return f"{TARGET if target else LIVE}.{k}"


def init_critics(params: ParamMap, spec: CriticSpec, rng) -> list[str]:
    if spec.n_critics < 2:
        raise ValueError("ensemble needs K >= 2")
    names = []
    for k in range(spec.n_critics):
        live = init_mlp(params, spec.prefix(k), spec.mlp, rng)
        for name in live:
            params.add(name.replace(f"{LIVE}.", f"{TARGET}.", 1), params[name].detach().numpy())
        names += live
    return names


def live_keys(params: ParamMap) -> list[str]:
    return params.with_prefix(f"{LIVE}.")


def target_keys(params: ParamMap) -> list[str]:
    return params.with_prefix(f"{TARGET}.")


def q_values(params, spec: CriticSpec, z: torch.Tensor, a: torch.Tensor, target: bool = False) -> torch.Tensor:
    """(K, B) values of every member; actions are clipped to the executable box."""
    if spec.action_bound is not None:
        a = torch.clamp(a, -spec.action_bound, spec.action_bound)
    x = torch.cat([z, a], dim=-1)
    return torch.stack([mlp_forward(params, spec.mlp, x, spec.prefix(k, target)).squeeze(-1)
                        for k in range(spec.n_critics)])


def target_min(params, spec: CriticSpec, z: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    return q_values(params, spec, z, a, target=True).min(0).values


def backup(params, spec: CriticSpec, reward_h: torch.Tensor, done: torch.Tensor, z_next: torch.Tensor,
           a_next: torch.Tensor, gamma: float, h: int) -> torch.Tensor:
    """r^(h) + gamma^h * min_j Qbar_j(z', a') with done masking; carries no gradient."""
    with torch.no_grad():
        boot = target_min(params, spec, z_next, a_next.detach())
        return reward_h + (gamma ** h) * (1.0 - done.to(reward_h.dtype)) * boot


def td_loss(params, spec: CriticSpec, z: torch.Tensor, a: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if z.shape[0] == 0:
        raise ValueError("empty batch")
    q = q_values(params, spec, z, a)
    return ((q - y.detach().unsqueeze(0)) ** 2).mean(1).mean()


def calql_reg(params, spec: CriticSpec, z: torch.Tensor, a_pi: torch.Tensor, a_data: torch.Tensor,
              v_mu: torch.Tensor | None) -> torch.Tensor:
    """Ensemble mean of E_s[max(Q(s, a_pi), V_mu(s)) - Q(s, a_data)]."""
    if v_mu is None:
        raise ValueError("calibration needs Monte Carlo values for every offline state")
    if z.shape[0] == 0:
        return z.new_zeros(())
    q_pi = q_values(params, spec, z, a_pi.detach())
    q_data = q_values(params, spec, z, a_data)
    return (torch.maximum(q_pi, v_mu.unsqueeze(0)) - q_data).mean(1).mean()


def critic_loss(td: torch.Tensor, cal: torch.Tensor, lambda_cal: float) -> torch.Tensor:
    if lambda_cal < 0:
        raise ValueError("lambda_cal must be non-negative")
    return td + lambda_cal * cal


def polyak_update(params: ParamMap, spec: CriticSpec, rate: float) -> None:
    pairs = []
    for k in range(spec.n_critics):
        for name in params.with_prefix(spec.prefix(k) + "."):
            pairs.append((name.replace(f"{LIVE}.", f"{TARGET}.", 1), name))
    polyak(params, params, rate, pairs)


def v_mu_from_demos(demos: DemoDataset, gamma: float, h: int) -> np.ndarray:
    """Monte Carlo return-to-go of the demonstrator at each chunk-aligned state.

    Discounting is per primitive step; raises on an episode without a terminal flag.
    """
    return np.asarray(dataclasses.replace(demos, gamma=gamma).chunks(h).value_mc, dtype=float)
