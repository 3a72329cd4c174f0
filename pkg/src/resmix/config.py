"""Run configuration: one flat key/value document, validated before any run.

Files are flat YAML mappings. Every key below may be overridden; unknown keys
are rejected. The run identity is a hash of the resolved document.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

import yaml


class ConfigError(ValueError):
    """A configuration field failed validation; the message names the field."""


@dataclass
class RunConfig:
    seed: int = 0
    # environment / data
    suite: str = "default"              # task suite used for demos and pretraining
    finetune_suite: str = "default"     # default | conflicting
    demos_per_task: int = 200
    gamma: float = 0.99
    h: int = 4
    # network sizes
    hidden_width: int = 128
    hidden_layers: int = 2
    d_z: int = 32
    d_e: int = 16
    # stage I
    n_off: int = 8000
    batch_off: int = 256
    lr_off: float = 1e-3
    lr_dv: float = 1e-3
    lambda_ib: float = 0.1
    # residual mixture
    n_experts: int = 8
    top_m: int = 2
    alpha: float = 0.05
    lambda_cl: float = 1.0
    lambda_lb: float = 0.1
    tau_cl: float = 0.1
    lb_eps: float = 1e-8
    beta_ent: float = 0.01
    # critics
    n_critics: int = 2
    lambda_cal: float = 1.0
    polyak: float = 0.005
    # stage II
    warmup_steps: int = 500
    n_on: int = 500
    updates_per_rollout: int = 20
    batch_size: int = 256
    lr_pi: float = 3e-4
    lr_q: float = 3e-4
    buffer_capacity: int = 50000
    target: float = 0.9
    tau_task: float = 0.2
    success_decay: float = 0.9
    difficulty_sampling: bool = True
    eval_every: int = 20
    eval_episodes: int = 20
    max_grad_norm: float = 10.0
    lr_base_ft: float = 1e-5            # encoder/base step size, full-finetune probes only
    # bookkeeping
    precision: str = "float64"
    log_every: int = 50

    # ---- validation -----------------------------------------------------
    def validate(self) -> RunConfig:
        def need(name, ok, what):
            if not ok:
                raise ConfigError(f"invalid config field {name!r} = {getattr(self, name)!r}: {what}")

        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", int):
                need(f.name, isinstance(v, int) and not isinstance(v, bool), "must be an integer")
            elif f.type in ("float", float):
                need(f.name, isinstance(v, (int, float)) and not isinstance(v, bool), "must be a number")
            elif f.type in ("bool", bool):
                need(f.name, isinstance(v, bool), "must be true/false")
            elif f.type in ("str", str):
                need(f.name, isinstance(v, str), "must be a string")
        need("suite", self.suite in ("default", "conflicting"), "one of default, conflicting")
        need("finetune_suite", self.finetune_suite in ("default", "conflicting"), "one of default, conflicting")
        need("seed", 0 <= self.seed < 2**63, "0 <= seed < 2^63")
        need("gamma", 0.0 < self.gamma <= 1.0, "in (0, 1]")
        for name in ("h", "demos_per_task", "hidden_width", "hidden_layers", "d_z", "d_e", "n_experts",
                     "batch_off", "batch_size", "buffer_capacity", "eval_episodes", "eval_every",
                     "updates_per_rollout", "log_every"):
            need(name, getattr(self, name) >= 1, ">= 1")
        for name in ("n_off", "n_on", "warmup_steps"):
            need(name, getattr(self, name) >= 0, ">= 0")
        need("top_m", 1 <= self.top_m <= self.n_experts, "1 <= top_m <= n_experts")
        need("alpha", self.alpha >= 0.0, ">= 0")
        need("n_critics", self.n_critics >= 2, ">= 2")
        for name in ("lambda_ib", "lambda_cl", "lambda_lb", "lambda_cal", "beta_ent"):
            need(name, getattr(self, name) >= 0.0, ">= 0")
        for name in ("tau_cl", "tau_task", "lb_eps", "lr_off", "lr_dv", "lr_pi", "lr_q", "max_grad_norm",
                     "lr_base_ft"):
            need(name, getattr(self, name) > 0.0, "> 0")
        need("polyak", 0.0 < self.polyak <= 1.0, "in (0, 1]")
        need("target", 0.0 < self.target <= 1.0, "in (0, 1]")
        need("success_decay", 0.0 <= self.success_decay < 1.0, "in [0, 1)")
        need("batch_size", self.batch_size % 2 == 0, "must be even (half offline, half online)")
        need("batch_off", self.batch_off >= 2, ">= 2 (permutation negatives)")
        need("precision", self.precision in ("float64", "float32"), "float64 or float32")
        return self

    # ---- io ---------------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    def replace(self, **kw) -> RunConfig:
        return dataclasses.replace(self, **kw).validate()

    def run_hash(self) -> str:
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        kw = {}
        for k, v in d.items():
            if known[k].type in ("float", float) and isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
            kw[k] = v
        return cls(**kw).validate()

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a flat key/value mapping")
        return cls.from_dict(data)


FIELD_DOCS = {
    "seed": "master seed; every stream derives from it",
    "suite": "task suite for demos and pretraining (default | conflicting)",
    "finetune_suite": "task suite for online fine-tuning (default | conflicting)",
    "demos_per_task": "scripted demonstrations per task",
    "gamma": "discount per primitive step",
    "h": "action chunk length",
    "hidden_width": "hidden units per layer for all MLPs",
    "hidden_layers": "hidden layers for encoder, base head, critics, experts",
    "d_z": "latent size",
    "d_e": "task-embedding size",
    "n_off": "offline pretraining steps",
    "batch_off": "offline minibatch size",
    "lr_off": "encoder + base-policy learning rate",
    "lr_dv": "DV critic learning rate",
    "lambda_ib": "bottleneck weight",
    "n_experts": "residual experts",
    "top_m": "experts active per call",
    "alpha": "residual bound per action component",
    "lambda_cl": "contrastive task-embedding weight",
    "lambda_lb": "load-balance weight",
    "tau_cl": "contrastive temperature",
    "lb_eps": "load-balance log epsilon",
    "beta_ent": "coefficient on log-probability in the actor loss",
    "n_critics": "critic ensemble size K",
    "lambda_cal": "calibration regularizer weight",
    "polyak": "target-network averaging rate",
    "warmup_steps": "offline-only critic/actor steps before interaction",
    "n_on": "online rollout episodes",
    "updates_per_rollout": "update rounds after each rollout episode",
    "batch_size": "online minibatch size (half offline, half online)",
    "lr_pi": "residual / router / embedding learning rate",
    "lr_q": "critic learning rate",
    "buffer_capacity": "online replay capacity in chunks",
    "target": "difficulty-sampling success target",
    "tau_task": "difficulty-sampling temperature",
    "success_decay": "EMA decay of per-task rollout success",
    "difficulty_sampling": "false samples tasks uniformly",
    "eval_every": "rollout episodes between evaluations",
    "eval_episodes": "evaluation episodes per task",
    "max_grad_norm": "global gradient-norm clip for every optimizer",
    "lr_base_ft": "encoder/base learning rate when the base is unfrozen (full-finetune probe)",
    "precision": "float64 or float32",
    "log_every": "metrics cadence in optimizer steps",
}
