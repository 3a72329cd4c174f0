"""Online fine-tuning of the routed residual mixture on a frozen base.

Loop shape: sample a task by difficulty, roll out one episode with the
augmented policy, then run ``U`` update rounds (critic step, policy step,
target averaging) on half-offline/half-online minibatches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import critic as C
from . import morr as M
from .base_policy import POL, predict_chunk
from .config import RunConfig
from .core import AdamState, ParamMap, adam_step, backward, diff_checkpoints, save_checkpoint
from .encoder import TASK_HEAD, encode, encoder_features, task_embedding
from .metrics import MetricsWriter
from .model import STAGE2_TAG, ModelSpec, add_stage2, freeze_base, frozen_keys
from .taskworld import ACT_DIM, ACTION_MAX, OBS_DIM, ChunkView, TaskSpec, reset_batch, step_batch, success_rate


class FrozenBaseViolation(RuntimeError):
    pass


def policy_keys(params: ParamMap) -> list[str]:
    """The online parameter set: embedding head, router, experts, std head, prototypes."""
    return params.with_prefix(f"{TASK_HEAD}.", f"{M.ROUTER}.", "expert.", f"{M.STD}.", M.PROTO)


# --------------------------------------------------------------------------
# Frozen-encoder views
# --------------------------------------------------------------------------

@dataclass
class FrozenView:
    """Everything the frozen encoder/base produce for a batch of observations."""

    feats: torch.Tensor
    z: torch.Tensor
    a_base: torch.Tensor


def frozen_view(params, spec: ModelSpec, obs: np.ndarray | torch.Tensor) -> FrozenView:
    with torch.no_grad():
        o = torch.as_tensor(obs, dtype=torch.float64) if not torch.is_tensor(obs) else obs
        o = o.to(params[f"{POL}.0.w"].dtype)
        lat = encode(params, spec.enc, o, "mean", with_task=False)
        return FrozenView(lat.features, lat.z, predict_chunk(params, spec.pol, lat.z).mean)


# --------------------------------------------------------------------------
# Replay
# --------------------------------------------------------------------------

FIELDS = ("obs", "next_obs", "feats", "z", "a_base", "next_feats", "next_z", "next_a_base", "action", "delta",
          "reward_h", "done", "task_idx", "weights", "v_mu")


class ChunkBuffer:
    """Column store of chunk transitions; ring semantics once ``capacity`` is reached."""

    def __init__(self, capacity: int, widths: dict[str, int], source: str, dtype=torch.float64):
        self.capacity = capacity
        self.source = source
        self.size = 0
        self.ptr = 0
        self.data = {k: torch.zeros((capacity, w) if w > 0 else (capacity,), dtype=dtype)
                     for k, w in widths.items()}

    def __len__(self) -> int:
        return self.size

    def add(self, rows: dict[str, torch.Tensor]) -> None:
        n = len(next(iter(rows.values())))
        for i in range(n):
            for k, v in rows.items():
                self.data[k][self.ptr] = v[i]
            self.ptr = (self.ptr + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> dict[str, torch.Tensor]:
        if self.size == 0:
            raise RuntimeError(f"{self.source} buffer is empty")
        idx = torch.as_tensor(rng.integers(self.size, size=n))
        return {k: v[idx] for k, v in self.data.items()}


def buffer_widths(spec: ModelSpec, n_experts: int) -> dict[str, int]:
    f, z, a = spec.enc.hidden[-1], spec.enc.d_z, spec.pol.chunk_dim
    return {"obs": OBS_DIM, "next_obs": OBS_DIM, "feats": f, "z": z, "a_base": a, "next_feats": f, "next_z": z, "next_a_base": a,
            "action": a, "delta": a, "reward_h": 0, "done": 0, "task_idx": 0, "weights": n_experts, "v_mu": 0}


def offline_buffer(params, spec: ModelSpec, chunks: ChunkView, task_index: dict[int, int]) -> ChunkBuffer:
    """Demonstration chunks with dataset actions and Monte Carlo values."""
    keep = np.isin(chunks.task_ids, list(task_index))
    ch = chunks.select(keep)
    cur = frozen_view(params, spec, ch.obs)
    nxt = frozen_view(params, spec, ch.next_obs)
    buf = ChunkBuffer(len(ch), buffer_widths(spec, spec.morr.n_experts), "offline")
    t = lambda x: torch.as_tensor(np.asarray(x, dtype=float))
    rows = {"obs": t(ch.obs), "next_obs": t(ch.next_obs), "feats": cur.feats, "z": cur.z, "a_base": cur.a_base, "next_feats": nxt.feats, "next_z": nxt.z,
            "next_a_base": nxt.a_base, "action": t(ch.actions), "delta": t(ch.actions) - cur.a_base,
            "reward_h": t(ch.reward_h), "done": t(ch.done), "task_idx": t([task_index[i] for i in ch.task_ids]),
            "v_mu": t(ch.value_mc)}
    for k, v in rows.items():
        buf.data[k][:] = v
    buf.size = len(ch)
    return buf


def live_views(params, spec: ModelSpec, batch: dict) -> dict:
    """Recompute latent and base columns from stored observations with the current base.

    Only needed when the base is being trained (full fine-tune probes);
    otherwise the stored frozen columns are exact.
    """
    out = dict(batch)
    lat = encode(params, spec.enc, batch["obs"], "mean", with_task=False)
    out.update(feats=lat.features, z=lat.z, a_base=predict_chunk(params, spec.pol, lat.z).mean)
    nxt = frozen_view(params, spec, batch["next_obs"])
    out.update(next_feats=nxt.feats, next_z=nxt.z, next_a_base=nxt.a_base)
    return out


def mixed_batch(offline: ChunkBuffer, online: ChunkBuffer, batch: int, rng: np.random.Generator) -> dict:
    """Half offline, half online, uniform with replacement inside each buffer."""
    if batch % 2:
        raise ValueError("batch size must be even")
    if len(online) == 0:
        raise RuntimeError("online buffer is empty; roll out before updating")
    off = offline.sample(batch // 2, rng)
    on = online.sample(batch // 2, rng)
    out = {k: torch.cat([off[k], on[k]]) for k in off}
    out["is_offline"] = torch.cat([torch.ones(batch // 2, dtype=torch.bool), torch.zeros(batch // 2, dtype=torch.bool)])
    return out


def offline_batch(offline: ChunkBuffer, batch: int, rng: np.random.Generator) -> dict:
    out = offline.sample(batch, rng)
    out["is_offline"] = torch.ones(batch, dtype=torch.bool)
    return out


# --------------------------------------------------------------------------
# Task sampling
# --------------------------------------------------------------------------

@dataclass
class SuccessTracker:
    task_ids: list[int]
    decay: float = 0.9
    rates: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for t in self.task_ids:
            self.rates.setdefault(t, 0.0)

    def update(self, task_id: int, success: bool) -> None:
        self.rates[task_id] = self.decay * self.rates[task_id] + (1.0 - self.decay) * float(success)


def difficulty_weights(rates: Sequence[float], target: float, tau: float) -> np.ndarray:
    """exp(max(0, target - sr) / tau); exactly 1 for tasks at or above target."""
    if not 0.0 < target <= 1.0 or tau <= 0.0:
        raise ValueError("need target in (0, 1] and tau > 0")
    gap = np.maximum(0.0, target - np.asarray(rates, dtype=float))
    return np.exp(gap / tau)


def difficulty_probs(rates: Sequence[float], target: float, tau: float) -> np.ndarray:
    w = difficulty_weights(rates, target, tau)
    return w / w.sum()


def difficulty_sample(tracker: SuccessTracker, tasks: Sequence[TaskSpec], target: float, tau: float,
                      rng: np.random.Generator) -> TaskSpec:
    p = difficulty_probs([tracker.rates[t.task_id] for t in tasks], target, tau)
    return tasks[int(rng.choice(len(tasks), p=p))]


# --------------------------------------------------------------------------
# Acting
# --------------------------------------------------------------------------

def act(params, spec: ModelSpec, view: FrozenView, rng=None, mode: str = "sample") -> M.AugmentedAction:
    with torch.no_grad():
        emb = task_embedding(params, spec.enc, view.feats)
        return M.augmented_action(params, spec.morr, view.z, emb, view.a_base, rng, mode)


def residual_policy_fn(params, spec: ModelSpec, mode: str = "mean"):
    """Evaluation policy: base mean chunk plus mixture-mean residual, clipped."""

    def run(obs: np.ndarray, task_ids=None) -> np.ndarray:
        out = act(params, spec, frozen_view(params, spec, obs), None, mode)
        return np.clip(out.action.numpy(), -ACTION_MAX, ACTION_MAX).reshape(len(obs), spec.pol.h, ACT_DIM)

    return run


def rollout(params, spec: ModelSpec, tasks: Sequence[TaskSpec], seeds: Sequence[int], rng: np.random.Generator,
            gamma: float, task_index: dict[int, int], mode: str = "sample") -> tuple[list[dict], np.ndarray, list]:
    """Run one episode per (task, seed) in lock-step; returns transitions per env in index order.

    Also returns the success flags and the executed primitive-action sequences.
    """
    h = spec.pol.h
    state, obs = reset_batch(tasks, seeds)
    n = len(tasks)
    per_env: list[list[dict]] = [[] for _ in range(n)]
    executed: list[list[np.ndarray]] = [[] for _ in range(n)]
    view = frozen_view(params, spec, obs)
    while not state.done.all():
        live = ~state.done
        prev_obs = obs
        out = act(params, spec, view, rng, mode)
        chunk = np.clip(out.action.numpy(), -ACTION_MAX, ACTION_MAX)
        rew = np.zeros((n, h))
        for k in range(h):
            was_live = ~state.done
            a_k = chunk[:, k * ACT_DIM:(k + 1) * ACT_DIM]
            for i in np.nonzero(was_live & live)[0]:
                executed[i].append(a_k[i].copy())
            obs, r, _ = step_batch(state, a_k)
            rew[:, k] = np.where(was_live, r, 0.0)
            if state.done.all():
                break
        nxt = frozen_view(params, spec, obs)
        disc = gamma ** np.arange(h)
        for i in np.nonzero(live)[0]:
            per_env[i].append({
                "obs": torch.as_tensor(prev_obs[i]), "next_obs": torch.as_tensor(obs[i]),
                "feats": view.feats[i], "z": view.z[i], "a_base": view.a_base[i],
                "next_feats": nxt.feats[i], "next_z": nxt.z[i], "next_a_base": nxt.a_base[i],
                "action": torch.as_tensor(chunk[i]), "delta": out.delta[i],
                "reward_h": torch.tensor(float(np.sum(rew[i] * disc))),
                # only success terminates; a time-limit cut still bootstraps
                "done": torch.tensor(float(state.success[i])),
                "task_idx": torch.tensor(float(task_index[tasks[i].task_id])), "weights": out.router.weights[i],
                "v_mu": torch.tensor(0.0), "task_id": tasks[i].task_id,
            })
        view = nxt
    return [tr for env in per_env for tr in env], state.success.copy(), executed


def stack_rows(transitions: list[dict]) -> dict[str, torch.Tensor]:
    return {k: torch.stack([tr[k] for tr in transitions]) for k in FIELDS}


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------

@dataclass
class Hyper:
    gamma: float
    h: int
    lambda_cal: float
    lambda_cl: float
    lambda_lb: float
    tau_cl: float
    lb_eps: float
    beta_ent: float

    @classmethod
    def from_config(cls, cfg: RunConfig) -> Hyper:
        return cls(cfg.gamma, cfg.h, cfg.lambda_cal, cfg.lambda_cl, cfg.lambda_lb, cfg.tau_cl, cfg.lb_eps, cfg.beta_ent)


def critic_objective(params, spec: ModelSpec, batch: dict, hp: Hyper, rng, noise: dict | None = None):
    """(L_Q, stats). Calibration covers only the offline rows of the batch."""
    noise = noise or {}
    with torch.no_grad():
        emb_next = task_embedding(params, spec.enc, batch["next_feats"])
        nxt = M.augmented_action(params, spec.morr, batch["next_z"], emb_next, batch["next_a_base"], rng, "sample",
                                 noise.get("next"))
        y = C.backup(params, spec.critic, batch["reward_h"], batch["done"], batch["next_z"], nxt.action, hp.gamma, hp.h)
    td = C.td_loss(params, spec.critic, batch["z"], batch["action"], y)
    off = batch["is_offline"]
    if hp.lambda_cal > 0 and bool(off.any()):
        with torch.no_grad():
            emb = task_embedding(params, spec.enc, batch["feats"][off])
            a_pi = M.augmented_action(params, spec.morr, batch["z"][off], emb, batch["a_base"][off], rng, "sample",
                                      noise.get("cal")).action
        cal = C.calql_reg(params, spec.critic, batch["z"][off], a_pi, batch["action"][off], batch["v_mu"][off])
        with torch.no_grad():
            q_pi = C.q_values(params, spec.critic, batch["z"][off], a_pi)
            clamp_rate = (batch["v_mu"][off].unsqueeze(0) > q_pi).double().mean()
    else:
        cal = td.new_zeros(())
        clamp_rate = td.new_zeros(())
    loss = C.critic_loss(td, cal, hp.lambda_cal)
    with torch.no_grad():
        q_mean = C.q_values(params, spec.critic, batch["z"], batch["action"]).mean()
    return loss, {"td": td.detach(), "cal": cal.detach(), "target_mean": y.mean(), "q_mean": q_mean,
                  "target_gap": q_mean - y.mean(), "cal_clamp_rate": clamp_rate}


def actor_loss(params, spec: ModelSpec, batch: dict, hp: Hyper, rng, noise=None):
    """mean(beta * log pi - mean_k Q_k) at fresh reparameterized samples.

    Critics are read through detached weights and the router sees a detached
    embedding, so only expert/std/router entries receive gradient here.
    """
    emb = task_embedding(params, spec.enc, batch["feats"])
    aug = M.augmented_action(params, spec.morr, batch["z"], emb.detach(), batch["a_base"], rng, "sample", noise)
    if not torch.isfinite(aug.log_prob).all():
        raise FloatingPointError("non-finite log-probability")
    # the critic's state input is detached too: when the encoder is trainable it
    # must follow the action pathway, not reshape the state the critic scores
    q = C.q_values(params.detached() if isinstance(params, ParamMap) else {k: v.detach() for k, v in params.items()},
                   spec.critic, batch["z"].detach(), aug.action)
    per_sample = hp.beta_ent * aug.log_prob - q.mean(0)
    return per_sample.mean(), aug, emb, q


def policy_objective(params, spec: ModelSpec, batch: dict, hp: Hyper, rng, noise=None):
    """L_pi = L_RL + lambda_cl * L_CL + lambda_lb * L_LB, plus the components."""
    l_rl, aug, emb, q = actor_loss(params, spec, batch, hp, rng, noise)
    l_cl = M.contrastive_loss(emb, batch["task_idx"].long(), params[M.PROTO], hp.tau_cl)
    l_lb = M.load_balance_loss(aug.router.probs, hp.lb_eps)
    total = l_rl + hp.lambda_cl * l_cl + hp.lambda_lb * l_lb
    return total, {"l_rl": l_rl.detach(), "l_cl": l_cl.detach(), "l_lb": l_lb.detach(),
                   "log_pi": aug.log_prob.mean().detach(), "q_pi": q.mean().detach(),
                   "probs_avg": aug.router.probs.mean(0).detach(), "weights": aug.router.weights.detach()}


# --------------------------------------------------------------------------
# Trainer
# --------------------------------------------------------------------------

class Trainer:
    """Holds the parameter map, optimizers, buffers and tracker of one online run."""

    def __init__(self, params: ParamMap, spec: ModelSpec, cfg: RunConfig, tasks: Sequence[TaskSpec],
                 demo_chunks: ChunkView, metrics: MetricsWriter | None = None, seed: int | None = None,
                 train_base: bool = False, stage1: ParamMap | None = None):
        self.params = params
        self.spec = spec
        self.cfg = cfg
        self.tasks = list(tasks)
        self.seed = cfg.seed if seed is None else seed
        self.metrics = metrics or MetricsWriter()
        self.hp = Hyper.from_config(cfg)
        self.task_index = {t.task_id: i for i, t in enumerate(self.tasks)}
        self.stage1 = stage1.copy() if stage1 is not None else params.copy()
        if TASK_HEAD + ".0.w" not in params:
            add_stage2(params, spec, self.seed)
        if train_base:
            # deliberately breaks the freeze: the whole base follows the RL gradient
            params.unfreeze(frozen_keys(params))
        else:
            freeze_base(params)
        self.rng = np.random.default_rng([self.seed, 0x0211E])
        self.opt_q = AdamState()
        self.opt_pi = AdamState()
        self.opt_base = AdamState()
        self.offline = offline_buffer(params, spec, demo_chunks, self.task_index)
        self.online = ChunkBuffer(cfg.buffer_capacity, buffer_widths(spec, spec.morr.n_experts), "online")
        self.tracker = SuccessTracker([t.task_id for t in self.tasks], cfg.success_decay)
        self.updates = 0
        self.episodes = 0
        self.extra_keys: list[str] = frozen_keys(params) if train_base else []

    # -- single update round ------------------------------------------------
    def update(self, batch: dict) -> dict:
        cfg = self.cfg
        stored = batch
        if self.extra_keys:
            with torch.no_grad():
                batch = live_views(self.params, self.spec, stored)
        lq, qs = critic_objective(self.params, self.spec, batch, self.hp, self.rng)
        if not torch.isfinite(lq):
            raise FloatingPointError(f"non-finite critic loss at update {self.updates}")
        adam_step(self.params, backward(lq, self.params, C.live_keys(self.params)), self.opt_q, cfg.lr_q,
                  cfg.max_grad_norm)
        if self.extra_keys:
            batch = live_views(self.params, self.spec, stored)
        lp, ps = policy_objective(self.params, self.spec, batch, self.hp, self.rng)
        if not torch.isfinite(lp):
            raise FloatingPointError(f"non-finite policy loss at update {self.updates}")
        keys = policy_keys(self.params)
        grads = backward(lp, self.params, keys + self.extra_keys)
        adam_step(self.params, {k: grads[k] for k in keys}, self.opt_pi, cfg.lr_pi, cfg.max_grad_norm)
        if self.extra_keys:
            adam_step(self.params, {k: grads[k] for k in self.extra_keys}, self.opt_base, cfg.lr_base_ft,
                      cfg.max_grad_norm)
        C.polyak_update(self.params, self.spec.critic, cfg.polyak)
        self.updates += 1
        stats = {"l_q": lq.item(), "l_pi": lp.item(), **{k: v.item() for k, v in qs.items()},
                 **{k: v.item() for k, v in ps.items() if v.dim() == 0}}
        if self.updates % cfg.log_every == 0:
            for k, v in stats.items():
                self.metrics.log(self.updates, "update", k, v)
            probs = ps["probs_avg"].numpy()
            for i, p in enumerate(probs):
                self.metrics.log(self.updates, "router", f"prob_avg_{i}", float(p))
            counts = (ps["weights"] > 0).sum(0).numpy()
            for i, c in enumerate(counts):
                self.metrics.log(self.updates, "router", f"select_count_{i}", int(c))
        return stats

    def warmup(self, steps: int) -> None:
        """Offline-only critic and policy steps before any interaction."""
        for _ in range(steps):
            self.update(offline_batch(self.offline, self.cfg.batch_size, self.rng))

    # -- interaction ----------------------------------------------------------
    def collect(self, task: TaskSpec) -> bool:
        seed = int(self.rng.integers(2**31))
        trans, success, _ = rollout(self.params, self.spec, [task], [seed], self.rng, self.cfg.gamma, self.task_index)
        self.online.add(stack_rows(trans))
        self.tracker.update(task.task_id, bool(success[0]))
        self.episodes += 1
        self.metrics.log(self.episodes, "rollout", "success", int(success[0]), task.task_id)
        self.metrics.log(self.episodes, "rollout", "chunks", len(trans), task.task_id)
        return bool(success[0])

    def next_task(self) -> TaskSpec:
        if self.cfg.difficulty_sampling:
            return difficulty_sample(self.tracker, self.tasks, self.cfg.target, self.cfg.tau_task, self.rng)
        return self.tasks[int(self.rng.integers(len(self.tasks)))]

    def evaluate(self, episodes: int | None = None, tasks: Sequence[TaskSpec] | None = None) -> dict:
        res = success_rate(residual_policy_fn(self.params, self.spec), tasks or self.tasks,
                           episodes or self.cfg.eval_episodes, eval_seed(self.seed))
        for tid, v in res["per_task"].items():
            self.metrics.log(self.episodes, "eval", "success", v, tid)
        self.metrics.log(self.episodes, "eval", "success_mean", res["mean"])
        return res

    def run(self, n_episodes: int, checkpoint_dir: Path | None = None) -> dict:
        last = self.evaluate()
        try:
            for _ in range(n_episodes):
                self.collect(self.next_task())
                for _ in range(self.cfg.updates_per_rollout):
                    self.update(mixed_batch(self.offline, self.online, self.cfg.batch_size, self.rng))
                if self.episodes % self.cfg.eval_every == 0:
                    last = self.evaluate()
                    if checkpoint_dir is not None:
                        save_checkpoint(Path(checkpoint_dir) / "last_good.ckpt", self.params, self.seed, STAGE2_TAG)
        except FloatingPointError:
            # last_good.ckpt (if any) stays as the most recent finite state
            raise
        if self.episodes % self.cfg.eval_every != 0:
            last = self.evaluate()
        self.check_frozen()
        return last

    def check_frozen(self) -> None:
        if self.extra_keys:
            return
        changed = diff_checkpoints(self.stage1, self.params, frozen_keys(self.stage1))
        if changed:
            raise FrozenBaseViolation(f"frozen entries changed: {changed[:5]}")


def eval_seed(seed: int) -> int:
    return int(np.random.default_rng([seed, 0xE7A1]).integers(2**31))


def base_success(params, spec: ModelSpec, tasks: Sequence[TaskSpec], episodes: int, seed: int) -> dict:
    from .base_policy import base_policy_fn
    return success_rate(base_policy_fn(params, spec.enc, spec.pol), tasks, episodes, eval_seed(seed))


def finetune(stage1: ParamMap, cfg: RunConfig, tasks: Sequence[TaskSpec], chunks: ChunkView,
             metrics: MetricsWriter | None = None, n_experts: int | None = None,
             checkpoint_dir: Path | None = None, seed: int | None = None) -> tuple[Trainer, dict]:
    """Warm up then run ``cfg.n_on`` online episodes on a copy of the Stage I parameters."""
    spec = ModelSpec.from_config(cfg, len(tasks), n_experts)
    tr = Trainer(stage1.copy(), spec, cfg, tasks, chunks, metrics, seed=seed, stage1=stage1)
    tr.warmup(cfg.warmup_steps)
    result = tr.run(cfg.n_on, checkpoint_dir)
    return tr, result
