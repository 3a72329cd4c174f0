"""Stochastic observation encoder and task-embedding head."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .core import DiagGaussian, MLPSpec, ParamMap, init_mlp, mlp_forward, sample_gaussian

ENC = "enc"
TASK_HEAD = "task_head"


@dataclass(frozen=True)
class EncoderSpec:
    obs_dim: int = 20
    hidden: tuple[int, ...] = (128, 128)
    d_z: int = 32
    d_e: int = 16
    task_hidden: tuple[int, ...] = (64,)

    @property
    def trunk(self) -> MLPSpec:
        return MLPSpec((self.obs_dim, *self.hidden), tuple(["tanh"] * len(self.hidden)))

    @property
    def head(self) -> MLPSpec:
        return MLPSpec.make(self.hidden[-1], (), 2 * self.d_z)

    @property
    def task(self) -> MLPSpec:
        return MLPSpec.make(self.hidden[-1], self.task_hidden, self.d_e)


@dataclass
class LatentSample:
    z_mean: torch.Tensor
    z_std: torch.Tensor
    z: torch.Tensor
    task_emb: torch.Tensor | None
    features: torch.Tensor


def init_encoder(params: ParamMap, spec: EncoderSpec, rng) -> list[str]:
    names = init_mlp(params, f"{ENC}.trunk", spec.trunk, rng)
    names += init_mlp(params, f"{ENC}.head", spec.head, rng)
    return names


def init_task_head(params: ParamMap, spec: EncoderSpec, rng) -> list[str]:
    """The embedding head belongs to the online parameter set, not the frozen encoder."""
    return init_mlp(params, TASK_HEAD, spec.task, rng)


def encoder_features(params, spec: EncoderSpec, obs: torch.Tensor) -> torch.Tensor:
    return mlp_forward(params, spec.trunk, obs, f"{ENC}.trunk")


def task_embedding(params, spec: EncoderSpec, features: torch.Tensor) -> torch.Tensor:
    e = mlp_forward(params, spec.task, features, TASK_HEAD)
    return e / torch.linalg.vector_norm(e, dim=-1, keepdim=True).clamp_min(1e-12)


def encode(params, spec: EncoderSpec, obs: torch.Tensor, mode: str = "mean", rng=None,
           with_task: bool = True) -> LatentSample:
    """Latent z (sampled or mean) plus the unit-norm task embedding.

    ``with_task`` is off during offline pretraining, before the head exists.
    """
    if obs.shape[-1] != spec.obs_dim:
        raise ValueError(f"observation length {obs.shape[-1]} != {spec.obs_dim}")
    if not torch.isfinite(obs).all():
        raise ValueError("non-finite observation")
    feats = encoder_features(params, spec, obs)
    out = mlp_forward(params, spec.head, feats, f"{ENC}.head")
    dist = DiagGaussian.from_log_std(out[..., :spec.d_z], out[..., spec.d_z:])
    if mode == "sample":
        z, _ = sample_gaussian(dist, rng)
    elif mode == "mean":
        z = dist.mean
    else:
        raise ValueError(f"unknown mode {mode!r}")
    emb = task_embedding(params, spec, feats) if with_task else None
    return LatentSample(dist.mean, dist.std, z, emb, feats)
