"""Analysis instruments: per-task gradient conflict, forgetting probes,
expert-count sweeps and task-embedding export."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import morr as M
from .config import RunConfig
from .core import ParamMap, backward
from .base_policy import base_policy_fn
from .encoder import task_embedding
from .metrics import MetricsWriter
from .model import ModelSpec
from .taskworld import ACTION_MAX, ChunkView, TaskSpec, reset_batch, step_batch, success_rate, task_groups
from .trainer import Hyper, Trainer, act, eval_seed, finetune, frozen_view, mixed_batch, \
    policy_objective, residual_policy_fn

VARIANTS = ("single-expert", "morr")


# --------------------------------------------------------------------------
# Gradient conflict
# --------------------------------------------------------------------------

@dataclass
class ConflictReport:
    tasks: list[int]
    matrix: np.ndarray
    variant: str

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (len(self.tasks), len(self.tasks)):
            raise ValueError("matrix shape does not match the task list")
        if not np.allclose(m, m.T, atol=1e-12):
            raise ValueError("cosine matrix is not symmetric")
        if np.any(np.abs(np.diag(m) - 1.0) > 1e-6):
            raise ValueError("cosine matrix diagonal is not 1")
        self.matrix = m

    def block_mean(self, rows: Sequence[int], cols: Sequence[int]) -> float:
        """Mean cosine over task pairs (r, c), r in rows, c in cols, r != c."""
        pos = {t: i for i, t in enumerate(self.tasks)}
        vals = [self.matrix[pos[r], pos[c]] for r in rows for c in cols if r != c]
        if not vals:
            raise ValueError("no task pairs in block")
        return float(np.mean(vals))

    def group_summary(self, groups: dict[str, list[int]]) -> dict[str, float]:
        out = {}
        names = [g for g in groups if len(groups[g])]
        for g in names:
            if len(groups[g]) > 1:
                out[f"within:{g}"] = self.block_mean(groups[g], groups[g])
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                out[f"cross:{a}|{b}"] = self.block_mean(groups[a], groups[b])
        return out


def cosine_matrix(vectors: Sequence[torch.Tensor]) -> np.ndarray:
    v = torch.stack([torch.as_tensor(x, dtype=torch.float64).reshape(-1) for x in vectors])
    norms = torch.linalg.vector_norm(v, dim=1)
    if bool((norms == 0).any()):
        raise ValueError("zero gradient vector; cosine undefined")
    u = v / norms[:, None]
    m = (u @ u.T).clamp(-1.0, 1.0)
    m = 0.5 * (m + m.T)
    m.fill_diagonal_(1.0)
    return m.numpy()


def acting_keys(params: ParamMap) -> list[str]:
    """Experts, shared std head and router: the parameters that shape the residual.

    The task head and prototypes are left out; their only gradient is the
    contrastive term, which on a task-pure batch pulls every task away from
    every other by construction and would swamp the behavioural signal.
    """
    return params.with_prefix("expert.", f"{M.STD}.", f"{M.ROUTER}.")


def task_gradient(params: ParamMap, spec: ModelSpec, trainer: Trainer, task: TaskSpec, hp: Hyper, batch: int,
                  seed: int) -> torch.Tensor:
    """Flattened policy-loss gradient over the acting parameters on a task-pure offline batch."""
    if task.task_id not in trainer.task_index:
        raise ValueError(f"task {task.task_id} is not part of the trainer's suite")
    idx_value = trainer.task_index[task.task_id]
    buf = trainer.offline
    rows = torch.nonzero(buf.data["task_idx"][:buf.size] == idx_value).squeeze(-1)
    if rows.numel() == 0:
        raise ValueError(f"task {task.task_id} has no buffer data")
    rng = np.random.default_rng([seed, task.task_id, 0x6AD])
    pick = rows[torch.as_tensor(rng.integers(rows.numel(), size=batch))]
    b = {k: v[pick] for k, v in buf.data.items()}
    b["is_offline"] = torch.ones(batch, dtype=torch.bool)
    noise = torch.as_tensor(rng.standard_normal((batch, spec.morr.top_m, spec.morr.chunk_dim)))
    loss, _ = policy_objective(params, spec, b, hp, None, noise)
    keys = acting_keys(params)
    g = backward(loss, params, keys)
    return torch.cat([g[k].reshape(-1) for k in keys])


def conflict_report(trainer: Trainer, tasks: Sequence[TaskSpec], variant: str, batch: int = 256,
                    seed: int = 0) -> ConflictReport:
    if len(tasks) < 2:
        raise ValueError("need at least two tasks")
    grads = [task_gradient(trainer.params, trainer.spec, trainer, t, trainer.hp, batch, seed) for t in tasks]
    return ConflictReport([t.task_id for t in tasks], cosine_matrix(grads), variant)


def diagnose_gradients(stage1: ParamMap, cfg: RunConfig, tasks: Sequence[TaskSpec], chunks: ChunkView,
                       variant: str = "both", warmup_steps: int | None = None, batch: int = 256,
                       seed: int | None = None) -> list[ConflictReport]:
    """Per-task gradient cosines after offline warmup, for one or both variants.

    Both variants start from the same Stage I parameters and see identical
    batches; they differ only in the number of residual experts.
    """
    variants = VARIANTS if variant == "both" else (variant,)
    seed = cfg.seed if seed is None else seed
    reports = []
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
        n_exp = 1 if v == "single-expert" else cfg.n_experts
        spec = ModelSpec.from_config(cfg, len(tasks), n_exp)
        tr = Trainer(stage1.copy(), spec, cfg, tasks, chunks, seed=seed, stage1=stage1)
        tr.warmup(cfg.warmup_steps if warmup_steps is None else warmup_steps)
        reports.append(conflict_report(tr, tasks, v, batch, seed))
    return reports


# --------------------------------------------------------------------------
# Forgetting probe
# --------------------------------------------------------------------------

PROBE_MODES = ("full-finetune", "residual")


@dataclass
class ProbeSeries:
    mode: str
    train_task: int
    probe_tasks: list[int]
    episodes: list[int] = field(default_factory=list)
    train_success: list[float] = field(default_factory=list)
    probe_success: dict[int, list[float]] = field(default_factory=dict)
    probe_baseline: dict[int, float] = field(default_factory=dict)
    composed_success: dict[int, list[float]] = field(default_factory=dict)

    @property
    def probe_mean(self) -> np.ndarray:
        return np.mean([self.probe_success[t] for t in self.probe_tasks], axis=0)

    @property
    def baseline_mean(self) -> float:
        return float(np.mean([self.probe_baseline[t] for t in self.probe_tasks]))

    def degradation(self) -> np.ndarray:
        """Drop of mean probe success below the Stage I base, in points, per evaluation."""
        return 100.0 * (self.baseline_mean - self.probe_mean)

    def rows(self) -> list[dict]:
        out = []
        for i, ep in enumerate(self.episodes):
            out.append({"mode": self.mode, "episode": ep, "train_success": self.train_success[i],
                        **{f"probe_{t}": self.probe_success[t][i] for t in self.probe_tasks},
                        **{f"composed_{t}": self.composed_success[t][i]
                           for t in self.probe_tasks if t in self.composed_success}})
        return out


def forgetting_probe(stage1: ParamMap, cfg: RunConfig, chunks: ChunkView, train_task: TaskSpec,
                     probe_tasks: Sequence[TaskSpec], mode: str, n_episodes: int | None = None,
                     eval_every: int | None = None, eval_episodes: int | None = None,
                     metrics: MetricsWriter | None = None, seed: int | None = None) -> ProbeSeries:
    """Fine-tune on one task and track success on held-out probe tasks.

    ``full-finetune`` unfreezes the encoder and base policy; ``residual``
    keeps them frozen. Probe success measures the shared pretrained model
    (encoder + base policy, as it stands at each evaluation) on the probe
    tasks; the train task is scored with the composed policy. The composed
    policy's probe success is recorded alongside for reference.
    """
    if mode not in PROBE_MODES:
        raise ValueError(f"mode must be one of {PROBE_MODES}")
    probe_ids = [t.task_id for t in probe_tasks]
    if train_task.task_id in probe_ids:
        raise ValueError("train task overlaps the probe tasks")
    if not probe_tasks:
        raise ValueError("no probe tasks")
    seed = cfg.seed if seed is None else seed
    n_episodes = cfg.n_on if n_episodes is None else n_episodes
    eval_every = cfg.eval_every if eval_every is None else eval_every
    eval_episodes = cfg.eval_episodes if eval_episodes is None else eval_episodes
    metrics = metrics or MetricsWriter()
    spec = ModelSpec.from_config(cfg, 1)
    tr = Trainer(stage1.copy(), spec, cfg, [train_task], chunks, metrics, seed=seed,
                 train_base=(mode == "full-finetune"), stage1=stage1)
    series = ProbeSeries(mode, train_task.task_id, probe_ids)
    base = success_rate(base_policy_fn(stage1, spec.enc, spec.pol), probe_tasks, eval_episodes, eval_seed(seed))
    series.probe_baseline = dict(base["per_task"])

    def record():
        composed = residual_policy_fn(tr.params, spec)
        shared = base_policy_fn(tr.params, spec.enc, spec.pol)
        tr_res = success_rate(composed, [train_task], eval_episodes, eval_seed(seed))
        pr_res = success_rate(shared, probe_tasks, eval_episodes, eval_seed(seed))
        co_res = success_rate(composed, probe_tasks, eval_episodes, eval_seed(seed))
        series.episodes.append(tr.episodes)
        series.train_success.append(tr_res["mean"])
        for t in probe_ids:
            series.probe_success.setdefault(t, []).append(pr_res["per_task"][t])
            series.composed_success.setdefault(t, []).append(co_res["per_task"][t])
            metrics.log(tr.episodes, "probe", "success", pr_res["per_task"][t], t)
            metrics.log(tr.episodes, "probe", "composed_success", co_res["per_task"][t], t)
        metrics.log(tr.episodes, "probe", "train_success", tr_res["mean"], train_task.task_id)

    tr.warmup(cfg.warmup_steps)
    record()
    for ep in range(1, n_episodes + 1):
        tr.collect(train_task)
        for _ in range(cfg.updates_per_rollout):
            tr.update(mixed_batch(tr.offline, tr.online, cfg.batch_size, tr.rng))
        if ep % eval_every == 0 or ep == n_episodes:
            record()
    if mode == "residual":
        tr.check_frozen()
    return series


# --------------------------------------------------------------------------
# Expert-count sweep
# --------------------------------------------------------------------------

SWEEP_COUNTS = (1, 2, 4, 8)


def expert_sweep(stage1_by_seed: dict[int, ParamMap], cfg: RunConfig, counts: Sequence[int],
                 tasks: Sequence[TaskSpec], chunks_by_seed: dict[int, ChunkView],
                 metrics: MetricsWriter | None = None) -> list[dict]:
    """One fine-tuning run per (count, seed); rows carry final mean success."""
    bad = [c for c in counts if c not in SWEEP_COUNTS]
    if bad:
        raise ValueError(f"expert counts must come from {SWEEP_COUNTS}, got {bad}")
    rows = []
    for c in counts:
        for seed, stage1 in stage1_by_seed.items():
            run_cfg = cfg.replace(seed=seed, n_experts=c, top_m=min(cfg.top_m, c))
            _, res = finetune(stage1, run_cfg, tasks, chunks_by_seed[seed], metrics, seed=seed)
            rows.append({"n_experts": c, "seed": seed, "success": res["mean"],
                         **{f"task_{k}": v for k, v in res["per_task"].items()}})
            if metrics is not None:
                metrics.log(seed, "sweep", f"success_n{c}", res["mean"])
    return rows


def sweep_table(rows: list[dict]) -> dict[int, float]:
    out: dict[int, list[float]] = {}
    for r in rows:
        out.setdefault(r["n_experts"], []).append(r["success"])
    return {c: float(np.mean(v)) for c, v in sorted(out.items())}


# --------------------------------------------------------------------------
# Task embeddings
# --------------------------------------------------------------------------

def collect_embeddings(params: ParamMap, spec: ModelSpec, tasks: Sequence[TaskSpec], episodes: int,
                       seed: int) -> list[tuple[int, int, int, np.ndarray]]:
    """Roll out the deterministic composed policy; one row per chunk decision.

    Rows are (task_id, episode, step, embedding).
    """
    ep_tasks = [t for t in tasks for _ in range(episodes)]
    ep_index = [e for _ in tasks for e in range(episodes)]
    seeds = [int(np.random.default_rng([seed, 0xE3B, e]).integers(2**31)) for e in ep_index]
    state, obs = reset_batch(ep_tasks, seeds)
    rows = []
    while not state.done.all():
        live = np.nonzero(~state.done)[0]
        view = frozen_view(params, spec, obs)
        with torch.no_grad():
            emb = task_embedding(params, spec.enc, view.feats).numpy()
        for i in live:
            rows.append((int(state.task_ids[i]), ep_index[i], int(state.t[i]), emb[i].copy()))
        out = act(params, spec, view, None, "mean")
        chunk = np.clip(out.action.numpy(), -ACTION_MAX, ACTION_MAX).reshape(len(obs), spec.pol.h, -1)
        for k in range(spec.pol.h):
            obs, _, _ = step_batch(state, chunk[:, k])
            if state.done.all():
                break
    return rows


def prototype_accuracy(params: ParamMap, rows, task_index: dict[int, int]) -> float:
    emb = torch.as_tensor(np.stack([r[3] for r in rows]))
    want = torch.as_tensor([task_index[r[0]] for r in rows])
    got = M.nearest_prototype(emb, params[M.PROTO].detach())
    return float((got == want).double().mean())


def format_embeddings(rows) -> str:
    """Whitespace-separated table: task_id episode step e_0 ... e_{d-1}."""
    if not rows:
        return ""
    d = len(rows[0][3])
    lines = ["task_id episode step " + " ".join(f"e{i}" for i in range(d))]
    for tid, ep, st, e in rows:
        lines.append(f"{tid} {ep} {st} " + " ".join(f"{v:.6f}" for v in e))
    return "\n".join(lines) + "\n"


def family_groups(tasks: Sequence[TaskSpec]) -> dict[str, list[int]]:
    return task_groups(tasks)
