"""Donsker-Varadhan mutual-information bound and the bottleneck penalty."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .core import MLPSpec, ParamMap, init_mlp, mlp_forward

DV = "dv"
EXP_CLAMP = 50.0


@dataclass(frozen=True)
class DVCriticSpec:
    x_dim: int
    z_dim: int
    hidden: tuple[int, ...] = (128, 128)
    prefix: str = DV

    @property
    def mlp(self) -> MLPSpec:
        return MLPSpec.make(self.x_dim + self.z_dim, self.hidden, 1)


def init_dv_critic(params: ParamMap, spec: DVCriticSpec, rng) -> list[str]:
    return init_mlp(params, spec.prefix, spec.mlp, rng)


def critic_scores(params, spec: DVCriticSpec, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    return mlp_forward(params, spec.mlp, torch.cat([x, z], dim=-1), spec.prefix).squeeze(-1)


def random_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 2:
        raise ValueError("permutation negatives need a batch of at least 2")
    return rng.permutation(n)


def permute_pairing(x: torch.Tensor, z: torch.Tensor, perm) -> tuple[torch.Tensor, torch.Tensor]:
    """Negative pairs (x_i, z_perm(i)); ``perm`` must be a bijection of the batch."""
    n = x.shape[0]
    if n < 2:
        raise ValueError("permutation negatives need a batch of at least 2")
    perm = np.asarray(perm)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError("perm is not a permutation of the batch indices")
    return x, z[torch.as_tensor(perm)]


def log_mean_exp(t: torch.Tensor) -> torch.Tensor:
    t = torch.clamp(t, -EXP_CLAMP, EXP_CLAMP)
    return torch.logsumexp(t, dim=0) - math.log(t.shape[0])


def dv_bound(t_pos: torch.Tensor, t_neg: torch.Tensor) -> torch.Tensor:
    """mean(T on joint pairs) - log mean exp(T on shuffled pairs)."""
    if t_pos.numel() == 0 or t_neg.numel() == 0:
        raise ValueError("empty batch")
    if t_pos.shape != t_neg.shape:
        raise ValueError("positive and negative batches differ in size")
    return t_pos.mean() - log_mean_exp(t_neg)


def dv_estimate(params, spec: DVCriticSpec, x: torch.Tensor, z: torch.Tensor, perm) -> torch.Tensor:
    xn, zn = permute_pairing(x, z, perm)
    return dv_bound(critic_scores(params, spec, x, z), critic_scores(params, spec, xn, zn))


def ib_penalty(params: ParamMap, spec: DVCriticSpec, x: torch.Tensor, z: torch.Tensor, perm,
               lam: float) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns (encoder term, critic term, bound value).

    The encoder term ``lam * I_DV`` reads the critic through detached weights,
    so it only trains whatever produced ``z``; the critic term ``-I_DV`` sees
    ``z`` detached, so it only trains the critic. One permutation serves both.
    """
    if lam < 0:
        raise ValueError("lambda_ib must be non-negative")
    enc_bound = dv_estimate(params.detached(), spec, x, z, perm)
    crit_bound = dv_estimate(params, spec, x.detach(), z.detach(), perm)
    return lam * enc_bound, -crit_bound, crit_bound.detach()


def gaussian_mi(rho: float) -> float:
    """Mutual information of a bivariate normal with correlation ``rho``."""
    return -0.5 * math.log(1.0 - rho * rho)


def train_mi_estimator(x: np.ndarray, z: np.ndarray, steps: int = 2000, batch: int = 512, lr: float = 1e-3,
                       seed: int = 0, hidden: tuple[int, ...] = (64, 64), eval_rounds: int = 8,
                       metrics=None, log_every: int = 100) -> tuple[float, list[float]]:
    """Fit a DV critic on paired samples and report the bound on the full set.

    The final estimate averages the bound over ``eval_rounds`` independent
    permutations of all samples, which keeps batch-level bias small.
    """
    from .core import AdamState, adam_step, backward

    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    z = np.asarray(z, dtype=float).reshape(len(z), -1)
    if len(x) != len(z) or len(x) < 2:
        raise ValueError("need at least two paired samples")
    rng = np.random.default_rng([seed, 0x311])
    spec = DVCriticSpec(x.shape[1], z.shape[1], hidden, prefix="mi")
    params = ParamMap()
    init_dv_critic(params, spec, rng)
    xt, zt = torch.as_tensor(x), torch.as_tensor(z)
    opt = AdamState()
    history = []
    for step in range(steps):
        idx = torch.as_tensor(rng.integers(len(x), size=min(batch, len(x))))
        bound = dv_estimate(params, spec, xt[idx], zt[idx], random_permutation(len(idx), rng))
        adam_step(params, backward(-bound, params), opt, lr)
        history.append(bound.item())
        if metrics is not None and step % log_every == 0:
            metrics.log(step, "mi", "dv_batch", bound.item())
    with torch.no_grad():
        est = float(np.mean([dv_estimate(params, spec, xt, zt, random_permutation(len(x), rng)).item()
                             for _ in range(eval_rounds)]))
    if metrics is not None:
        metrics.log(steps, "mi", "dv_estimate", est)
    return est, history


def correlated_gaussians(rho: float, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    if not -1.0 < rho < 1.0:
        raise ValueError("rho must lie in (-1, 1)")
    rng = np.random.default_rng([seed, 0xC0])
    x = rng.standard_normal(n)
    z = rho * x + math.sqrt(1.0 - rho * rho) * rng.standard_normal(n)
    return x[:, None], z[:, None]
