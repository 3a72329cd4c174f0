"""Chunked Gaussian base policy and offline pretraining with the bottleneck penalty."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import ib
from .core import AdamState, DiagGaussian, MLPSpec, ParamMap, adam_step, backward, init_mlp, mlp_forward
from .encoder import ENC, EncoderSpec, encode
from .metrics import MetricsWriter
from .taskworld import ACTION_MAX, ChunkView

POL = "pol"


@dataclass(frozen=True)
class BasePolicySpec:
    d_z: int = 32
    hidden: tuple[int, ...] = (128, 128)
    h: int = 4
    act_dim: int = 2

    @property
    def chunk_dim(self) -> int:
        return self.h * self.act_dim

    @property
    def mlp(self) -> MLPSpec:
        return MLPSpec.make(self.d_z, self.hidden, 2 * self.chunk_dim)


def init_base_policy(params: ParamMap, spec: BasePolicySpec, rng) -> list[str]:
    return init_mlp(params, POL, spec.mlp, rng)


def predict_chunk(params, spec: BasePolicySpec, z: torch.Tensor) -> DiagGaussian:
    """Gaussian over a flat action chunk. The mean is not clipped here."""
    if z.shape[-1] != spec.d_z:
        raise ValueError(f"latent length {z.shape[-1]} != {spec.d_z}")
    out = mlp_forward(params, spec.mlp, z, POL)
    return DiagGaussian.from_log_std(out[..., :spec.chunk_dim], out[..., spec.chunk_dim:])


def stage1_loss(params: ParamMap, enc: EncoderSpec, pol: BasePolicySpec, dv: ib.DVCriticSpec,
                obs: torch.Tensor, actions: torch.Tensor, lam: float, rng: np.random.Generator,
                perm=None) -> tuple[torch.Tensor, torch.Tensor, dict]:
    """(L_base, DV-critic loss, stats) for one minibatch of (o, a*) chunk pairs."""
    if obs.shape[0] == 0:
        raise ValueError("empty batch")
    lat = encode(params, enc, obs, "sample", rng, with_task=False)
    nll = -predict_chunk(params, pol, lat.z).log_prob(actions).mean()
    if perm is None:
        perm = ib.random_permutation(obs.shape[0], rng)
    enc_term, critic_term, bound = ib.ib_penalty(params, dv, obs, lat.z, perm, lam)
    return nll + enc_term, critic_term, {"bc_nll": nll.detach(), "i_dv": bound, "ib_term": enc_term.detach()}


def stage1_keys(params: ParamMap) -> tuple[list[str], list[str]]:
    return params.with_prefix(f"{ENC}.", f"{POL}."), params.with_prefix(f"{ib.DV}.")


def pretrain(params: ParamMap, enc: EncoderSpec, pol: BasePolicySpec, dv: ib.DVCriticSpec, data: ChunkView,
             n_steps: int, batch: int, lr: float, lr_dv: float, lam: float, seed: int,
             metrics: MetricsWriter | None = None, log_every: int = 50, max_grad_norm: float | None = 10.0) -> dict:
    """Adversarial schedule: one encoder/policy descent step, then one DV-critic ascent step."""
    if len(data) == 0:
        raise ValueError("no demonstrations")
    rng = np.random.default_rng([seed, 0x57A6E1])
    theta, nu = stage1_keys(params)
    opt_theta, opt_nu = AdamState(), AdamState()
    obs_all = torch.as_tensor(data.obs, dtype=params.dtype)
    act_all = torch.as_tensor(data.actions, dtype=params.dtype)
    history = {"bc_nll": [], "i_dv": [], "loss": []}
    last_logged = -1
    for step in range(n_steps):
        idx = torch.as_tensor(rng.integers(len(data), size=batch))
        loss, critic_loss, stats = stage1_loss(params, enc, pol, dv, obs_all[idx], act_all[idx], lam, rng)
        if not torch.isfinite(loss) or not torch.isfinite(critic_loss):
            raise FloatingPointError(f"non-finite stage-1 loss at step {step}: {loss.item()} / {critic_loss.item()}")
        g_theta = backward(loss, params, theta)
        g_nu = backward(critic_loss, params, nu)
        adam_step(params, g_theta, opt_theta, lr, max_grad_norm)
        adam_step(params, g_nu, opt_nu, lr_dv, max_grad_norm)
        history["loss"].append(loss.item())
        history["bc_nll"].append(stats["bc_nll"].item())
        history["i_dv"].append(stats["i_dv"].item())
        if metrics is not None and (step % log_every == 0 or step == n_steps - 1):
            metrics.log(step, "stage1", "loss", loss.item())
            # mean over the steps since the previous record
            metrics.log(step, "stage1", "loss_avg", float(np.mean(history["loss"][last_logged + 1:])))
            last_logged = step
            metrics.log(step, "stage1", "bc_nll", stats["bc_nll"].item())
            metrics.log(step, "stage1", "i_dv", stats["i_dv"].item())
    return history


def base_policy_fn(params, enc: EncoderSpec, pol: BasePolicySpec):
    """Deterministic evaluation policy: mean latent, mean chunk, clipped to the action box."""

    def act(obs: np.ndarray, task_ids=None) -> np.ndarray:
        with torch.no_grad():
            o = torch.as_tensor(obs, dtype=torch.float64 if not isinstance(params, ParamMap) else params.dtype)
            z = encode(params, enc, o, "mean", with_task=False).z
            mean = predict_chunk(params, pol, z).mean
        return np.clip(mean.numpy(), -ACTION_MAX, ACTION_MAX).reshape(len(obs), pol.h, pol.act_dim)

    return act
