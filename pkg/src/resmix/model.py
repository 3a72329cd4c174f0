"""Network shapes for a run and construction of its parameter map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .base_policy import POL, BasePolicySpec, init_base_policy
from .config import RunConfig
from .core import ParamMap
from .critic import CriticSpec, init_critics
from .encoder import ENC, EncoderSpec, init_encoder, init_task_head
from .ib import DVCriticSpec, init_dv_critic
from .morr import MoRRSpec, init_morr
from .taskworld import ACT_DIM, OBS_DIM

STAGE1_TAG = "stage1"
STAGE2_TAG = "stage2"


@dataclass(frozen=True)
class ModelSpec:
    enc: EncoderSpec
    pol: BasePolicySpec
    dv: DVCriticSpec
    morr: MoRRSpec
    critic: CriticSpec

    @classmethod
    def from_config(cfg_cls, cfg: RunConfig, n_tasks: int, n_experts: int | None = None) -> ModelSpec:
        hidden = (cfg.hidden_width,) * cfg.hidden_layers
        chunk = cfg.h * ACT_DIM
        n_exp = cfg.n_experts if n_experts is None else n_experts
        return cfg_cls(
            enc=EncoderSpec(OBS_DIM, hidden, cfg.d_z, cfg.d_e),
            pol=BasePolicySpec(cfg.d_z, hidden, cfg.h, ACT_DIM),
            dv=DVCriticSpec(OBS_DIM, cfg.d_z, hidden),
            morr=MoRRSpec(cfg.d_z, chunk, cfg.d_e, n_tasks, n_exp, min(cfg.top_m, n_exp), cfg.alpha, hidden),
            critic=CriticSpec(cfg.d_z, chunk, hidden, cfg.n_critics),
        )


def dtype_of(cfg: RunConfig) -> torch.dtype:
    return torch.float64 if cfg.precision == "float64" else torch.float32


def build_stage1(spec: ModelSpec, seed: int, dtype: torch.dtype = torch.float64) -> ParamMap:
    rng = np.random.default_rng([seed, 0x1417])
    params = ParamMap(dtype)
    init_encoder(params, spec.enc, rng)
    init_base_policy(params, spec.pol, rng)
    init_dv_critic(params, spec.dv, rng)
    return params


def frozen_keys(params: ParamMap) -> list[str]:
    """Encoder and base-policy entries: fixed for the whole online stage."""
    return params.with_prefix(f"{ENC}.", f"{POL}.")


def freeze_base(params: ParamMap) -> list[str]:
    keys = frozen_keys(params)
    params.freeze(keys)
    return keys


def add_stage2(params: ParamMap, spec: ModelSpec, seed: int) -> None:
    rng = np.random.default_rng([seed, 0x2417])
    init_task_head(params, spec.enc, rng)
    init_morr(params, spec.morr, rng)
    init_critics(params, spec.critic, rng)
