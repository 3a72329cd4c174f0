"""Routed mixture of bounded residual experts on top of a frozen base chunk.

Each active expert proposes a pre-squash Gaussian over the residual chunk
(its own mean, a shared std head). The router's top-m weights mix the expert
draws before the ``alpha * tanh`` squash, so the mixed residual has a
closed-form density: a Gaussian with mean ``sum w_i mu_i`` and std
``sigma * sqrt(sum w_i^2)``, pushed through the squash.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import LOG_2PI, DiagGaussian, MLPSpec, ParamMap, init_mlp, mlp_forward

ROUTER = "router"
PROTO = "proto"
STD = "res_std"


def expert_prefix(i: int) -> str:
    return f"expert.{i}"


@dataclass(frozen=True)
class MoRRSpec:
    d_z: int = 32
    chunk_dim: int = 8
    d_e: int = 16
    n_tasks: int = 8
    n_experts: int = 8
    top_m: int = 2
    alpha: float = 0.05
    hidden: tuple[int, ...] = (128, 128)
    router_hidden: tuple[int, ...] = (64,)
    init_log_std: float = -1.0

    @property
    def expert(self) -> MLPSpec:
        return MLPSpec.make(self.d_z + self.chunk_dim, self.hidden, self.chunk_dim)

    @property
    def std(self) -> MLPSpec:
        return MLPSpec.make(self.d_z + self.chunk_dim, self.hidden, self.chunk_dim)

    @property
    def router(self) -> MLPSpec:
        return MLPSpec.make(self.d_e, self.router_hidden, self.n_experts)


def init_morr(params: ParamMap, spec: MoRRSpec, rng) -> list[str]:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    names = init_mlp(params, ROUTER, spec.router, rng)
    for i in range(spec.n_experts):
        names += init_mlp(params, expert_prefix(i), spec.expert, rng, out_scale=0.01)
    names += init_mlp(params, STD, spec.std, rng, out_scale=0.01)
    last = f"{STD}.{len(spec.std.sizes) - 2}.b"
    with torch.no_grad():
        params[last].fill_(spec.init_log_std)
    protos = rng.standard_normal((spec.n_tasks, spec.d_e))
    params.add(PROTO, protos / np.linalg.norm(protos, axis=1, keepdims=True))
    return names + [PROTO]


# --------------------------------------------------------------------------
# Routing
# --------------------------------------------------------------------------

@dataclass
class RouterOutput:
    probs: torch.Tensor     # (B, N) full softmax distribution
    weights: torch.Tensor   # (B, N) renormalized top-m weights, zero elsewhere
    indices: torch.Tensor   # (B, m) selected experts, by descending prob

    @property
    def selected_weights(self) -> torch.Tensor:
        return torch.gather(self.weights, -1, self.indices)


def route_logits(logits: torch.Tensor, m: int) -> RouterOutput:
    """Softmax, keep the m largest entries (ties to the lower index), renormalize."""
    n = logits.shape[-1]
    if not 1 <= m <= n:
        raise ValueError(f"top_m={m} outside [1, {n}]")
    probs = torch.softmax(logits, dim=-1)
    order = torch.argsort(-probs.detach(), dim=-1, stable=True)
    idx = order[..., :m]
    sel = torch.gather(probs, -1, idx)
    sel = sel / sel.sum(-1, keepdim=True)
    weights = torch.zeros_like(probs).scatter(-1, idx, sel)
    return RouterOutput(probs, weights, idx)


def route(params, spec: MoRRSpec, task_emb: torch.Tensor, m: int | None = None) -> RouterOutput:
    return route_logits(mlp_forward(params, spec.router, task_emb, ROUTER), spec.top_m if m is None else m)


# --------------------------------------------------------------------------
# Experts
# --------------------------------------------------------------------------

@dataclass
class BoundedResidual:
    """Pre-squash Gaussian plus the bound; samples map through ``alpha * tanh``."""

    raw: DiagGaussian
    alpha: float

    @property
    def mean(self) -> torch.Tensor:
        return self.alpha * torch.tanh(self.raw.mean)

    def squash(self, u: torch.Tensor) -> torch.Tensor:
        return self.alpha * torch.tanh(u)


def _expert_input(z: torch.Tensor, a_base: torch.Tensor) -> torch.Tensor:
    return torch.cat([z, a_base], dim=-1)


def residual_log_std(params, spec: MoRRSpec, z: torch.Tensor, a_base: torch.Tensor) -> torch.Tensor:
    return mlp_forward(params, spec.std, _expert_input(z, a_base), STD)


def expert_residual_dist(params, spec: MoRRSpec, i: int, z: torch.Tensor, a_base: torch.Tensor) -> BoundedResidual:
    if not 0 <= i < spec.n_experts:
        raise IndexError(f"expert index {i} outside [0, {spec.n_experts})")
    x = _expert_input(z, a_base)
    mu = mlp_forward(params, spec.expert, x, expert_prefix(i))
    return BoundedResidual(DiagGaussian.from_log_std(mu, residual_log_std(params, spec, z, a_base)), spec.alpha)


def selected_expert_means(params, spec: MoRRSpec, router: RouterOutput, z: torch.Tensor,
                          a_base: torch.Tensor) -> torch.Tensor:
    """(B, m, D) pre-squash means, evaluating each expert only on rows that chose it."""
    x = _expert_input(z, a_base)
    B, m = router.indices.shape
    out = x.new_zeros((B, m, spec.chunk_dim))
    for e in range(spec.n_experts):
        hit = router.indices == e
        if not bool(hit.any()):
            continue
        rows, slots = torch.nonzero(hit, as_tuple=True)
        mu = mlp_forward(params, spec.expert, x[rows], expert_prefix(e))
        out = out.index_put((rows, slots), mu)
    return out


def mix_residual(weights: torch.Tensor, samples: torch.Tensor) -> torch.Tensor:
    """Convex combination sum_i w_i * s_i; weights (B, m), samples (B, m, D)."""
    if samples.shape[:-1] != weights.shape:
        raise ValueError("need exactly one sample per selected expert")
    return (weights.unsqueeze(-1) * samples).sum(-2)


def log1m_tanh_sq(u: torch.Tensor) -> torch.Tensor:
    """log(1 - tanh(u)^2), stable for large |u|."""
    return 2.0 * (math.log(2.0) - u - F.softplus(-2.0 * u))


@dataclass
class AugmentedAction:
    action: torch.Tensor      # base mean + residual, unclipped (B, D)
    delta: torch.Tensor       # bounded residual (B, D)
    log_prob: torch.Tensor    # (B,)
    router: RouterOutput
    pre_squash: torch.Tensor  # mixed pre-squash residual (B, D)


def augmented_action(params, spec: MoRRSpec, z: torch.Tensor, task_emb: torch.Tensor, a_base_mean: torch.Tensor,
                     rng: np.random.Generator | None = None, mode: str = "sample",
                     noise: torch.Tensor | None = None) -> AugmentedAction:
    """Compose the base mean chunk with the routed residual.

    ``noise`` (B, m, D) overrides the rng draw, which keeps losses
    deterministic under finite-difference probes.
    """
    router = route(params, spec, task_emb)
    w = router.selected_weights
    mu = selected_expert_means(params, spec, router, z, a_base_mean)
    log_std = torch.clamp(residual_log_std(params, spec, z, a_base_mean), -5.0, 2.0)
    sigma = torch.exp(log_std)
    mix_mean = mix_residual(w, mu)
    mix_std = sigma * torch.sqrt((w * w).sum(-1, keepdim=True))
    if mode == "sample":
        if noise is None:
            noise = torch.as_tensor(rng.standard_normal(tuple(mu.shape)), dtype=mu.dtype)
        u = mix_residual(w, mu + sigma.unsqueeze(-2) * noise)
    elif mode == "mean":
        u = mix_mean
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if spec.alpha > 0:
        delta = spec.alpha * torch.tanh(u)
        zsc = (u - mix_mean) / mix_std
        logp = (-0.5 * LOG_2PI - torch.log(mix_std) - 0.5 * zsc * zsc).sum(-1)
        logp = logp - (math.log(spec.alpha) + log1m_tanh_sq(u)).sum(-1)
    else:
        # zero bound: the residual is the point mass at 0
        delta = torch.zeros_like(u)
        logp = torch.zeros(u.shape[:-1], dtype=u.dtype)
    action = a_base_mean + delta
    if not torch.isfinite(action).all():
        raise FloatingPointError("non-finite composed action")
    return AugmentedAction(action, delta, logp, router, u)


def residual_density(x: torch.Tensor, mean: torch.Tensor, std: torch.Tensor, alpha: float) -> torch.Tensor:
    """Density of alpha * tanh(u), u ~ N(mean, std^2), per component; for checks."""
    u = torch.atanh(x / alpha)
    zsc = (u - mean) / std
    return torch.exp(-0.5 * zsc * zsc - 0.5 * LOG_2PI - torch.log(std)) / (alpha * (1.0 - (x / alpha) ** 2))


# --------------------------------------------------------------------------
# Auxiliary losses
# --------------------------------------------------------------------------

def contrastive_loss(task_emb: torch.Tensor, task_ids, prototypes: torch.Tensor, tau: float) -> torch.Tensor:
    """Cross-entropy of classifying each embedding to its task prototype (dot-product logits)."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    ids = torch.as_tensor(task_ids, dtype=torch.long)
    n = prototypes.shape[0]
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= n):
        raise ValueError(f"task id outside [0, {n})")
    return F.cross_entropy(task_emb @ prototypes.T / tau, ids)


def load_balance_loss(probs: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """sum_i p_avg,i * log(p_avg,i + eps) over the batch-average routing distribution."""
    if probs.shape[0] == 0:
        raise ValueError("empty batch")
    if eps <= 0:
        raise ValueError("eps must be positive")
    avg = probs.mean(0)
    return (avg * torch.log(avg + eps)).sum()


def nearest_prototype(task_emb: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    return torch.argmax(task_emb @ prototypes.T, dim=-1)
