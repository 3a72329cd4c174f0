"""Seeded multi-task point-mass world with sparse rewards.

Three task families share one arena: ``reach`` (move the agent onto a goal),
``push-left`` and ``push-right`` (shove a round object onto a goal lying on
the left or right of its start). Push tasks come in lanes; the left and right
task of a lane start from the same object region, so their expert actions
point in opposite directions.

All dynamics run on arrays with a leading batch axis. The single-episode
``reset``/``step`` pair is a thin view over the batched code.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

ARENA = 1.0
T_MAX = 100
SUCCESS_RADIUS = 0.05
ACTION_MAX = 0.1
CONTACT_RADIUS = 0.08
STEP_PENALTY = -0.01
SUCCESS_REWARD = 1.0
EXPERT_NOISE = 0.01
EXPERT_GAIN = 0.5
STAGING_OFFSET = 0.15
SUBSTEPS = 4

OBS_DIM = 20
ACT_DIM = 2
NUISANCE_DIM = 8

FAMILIES = ("reach", "push-left", "push-right")
REACH, PUSH_LEFT, PUSH_RIGHT = range(3)

# observation slices
AGENT = slice(0, 2)
OBJECT = slice(2, 4)
GOAL = slice(4, 6)
CUE = slice(6, 10)
NUISANCE = slice(10, 18)
PROPRIO = slice(18, 20)


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    family: str
    goal: tuple[float, float]
    cue: tuple[float, float, float, float]
    # push tasks: centre of the object start region
    object_centre: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if max(abs(self.goal[0]), abs(self.goal[1])) > ARENA:
            raise ValueError("goal outside arena")

    @property
    def family_index(self) -> int:
        return FAMILIES.index(self.family)


def default_suite() -> list[TaskSpec]:
    """Four reach tasks, two push-left and two push-right (two shared lanes)."""
    tasks = []
    reach_goals = [(0.6, 0.6), (-0.6, 0.6), (-0.6, -0.6), (0.6, -0.6)]
    for i, (g, v) in enumerate(zip(reach_goals, (-1.5, -0.5, 0.5, 1.5))):
        tasks.append(TaskSpec(i, "reach", g, (1.0, 0.0, 0.0, v)))
    lanes = [0.5, -0.5]
    tid = 4
    for fam, sign in (("push-left", -1.0), ("push-right", 1.0)):
        for lane_y, lane_code in zip(lanes, (1.0, -1.0)):
            tasks.append(TaskSpec(tid, fam, (sign * 0.5, lane_y), (0.0, 1.0, sign, lane_code),
                                  object_centre=(0.0, lane_y)))
            tid += 1
    return tasks


def conflicting_suite(tasks: Sequence[TaskSpec] | None = None) -> list[TaskSpec]:
    """The push tasks of a suite: two left/right pairs over shared objects."""
    tasks = default_suite() if tasks is None else tasks
    return [t for t in tasks if t.family != "reach"]


def task_groups(tasks: Sequence[TaskSpec]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for t in tasks:
        groups.setdefault(t.family, []).append(t.task_id)
    return groups


# --------------------------------------------------------------------------
# State and dynamics
# --------------------------------------------------------------------------

@dataclass
class EnvState:
    """Batched episode state; every array has leading axis n."""

    task_ids: np.ndarray
    family: np.ndarray
    agent: np.ndarray
    obj: np.ndarray
    goal: np.ndarray
    cue: np.ndarray
    nuisance: np.ndarray
    proprio: np.ndarray
    seeds: np.ndarray
    t: np.ndarray = field(default=None)
    done: np.ndarray = field(default=None)
    success: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.task_ids)
        if self.t is None:
            self.t = np.zeros(n, dtype=np.int64)
        if self.done is None:
            self.done = np.zeros(n, dtype=bool)
        if self.success is None:
            self.success = np.zeros(n, dtype=bool)

    def __len__(self) -> int:
        return len(self.task_ids)

    def observe(self) -> np.ndarray:
        return np.concatenate([self.agent, self.obj, self.goal, self.cue, self.nuisance, self.proprio], axis=1)


def episode_rng(task: TaskSpec, seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(task.task_id), 0x5EED])


def reset_batch(tasks: Sequence[TaskSpec], seeds: Sequence[int]) -> tuple[EnvState, np.ndarray]:
    n = len(tasks)
    agent = np.zeros((n, 2))
    obj = np.zeros((n, 2))
    nuisance = np.zeros((n, NUISANCE_DIM))
    for i, (task, seed) in enumerate(zip(tasks, seeds)):
        rng = episode_rng(task, seed)
        if task.family == "reach":
            r = 0.3 * np.sqrt(rng.uniform())
            ang = rng.uniform(0.0, 2.0 * np.pi)
            agent[i] = (r * np.cos(ang), r * np.sin(ang))
            obj[i] = agent[i]
        else:
            obj[i] = np.asarray(task.object_centre) + rng.uniform(-0.05, 0.05, size=2)
            side = 1.0 if rng.uniform() < 0.5 else -1.0
            agent[i] = obj[i] + np.array([0.0, side * 0.25]) + rng.uniform(-0.05, 0.05, size=2)
        nuisance[i] = rng.standard_normal(NUISANCE_DIM)
    state = EnvState(
        task_ids=np.array([t.task_id for t in tasks], dtype=np.int64),
        family=np.array([t.family_index for t in tasks], dtype=np.int64),
        agent=np.clip(agent, -ARENA, ARENA),
        obj=np.clip(obj, -ARENA, ARENA),
        goal=np.array([t.goal for t in tasks], dtype=float).reshape(n, 2),
        cue=np.array([t.cue for t in tasks], dtype=float).reshape(n, 4),
        nuisance=nuisance,
        proprio=np.zeros((n, 2)),
        seeds=np.asarray(seeds, dtype=np.int64),
    )
    return state, state.observe()


def _success(state: EnvState) -> np.ndarray:
    pos = np.where((state.family == REACH)[:, None], state.agent, state.obj)
    return np.linalg.norm(pos - state.goal, axis=1) < SUCCESS_RADIUS


def step_batch(state: EnvState, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Advance every live episode by one primitive step.

    Finished episodes are left untouched and receive reward 0.
    """
    live = ~state.done
    a = np.clip(np.asarray(actions, dtype=float).reshape(len(state), 2), -ACTION_MAX, ACTION_MAX)
    a = np.where(live[:, None], a, 0.0)
    push = live & (state.family != REACH)
    # sub-steps keep each displacement well below the contact radius (no tunnelling)
    for _ in range(SUBSTEPS):
        state.agent = np.clip(state.agent + a / SUBSTEPS, -ARENA, ARENA)
        d = state.obj - state.agent
        dist = np.linalg.norm(d, axis=1)
        contact = push & (dist < CONTACT_RADIUS)
        if contact.any():
            heading = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
            direction = np.where((dist > 1e-12)[:, None], d / np.maximum(dist, 1e-12)[:, None], heading)
            pushed = np.clip(state.agent + CONTACT_RADIUS * direction, -ARENA, ARENA)
            state.obj = np.where(contact[:, None], pushed, state.obj)
    state.proprio = np.where(live[:, None], a, state.proprio)
    state.t = state.t + live
    succ = live & _success(state)
    rewards = np.where(live, np.where(succ, SUCCESS_REWARD, STEP_PENALTY), 0.0)
    state.success = state.success | succ
    state.done = state.done | succ | (live & (state.t >= T_MAX))
    return state.observe(), rewards, state.done.copy()


def reset(task: TaskSpec, seed: int) -> tuple[EnvState, np.ndarray]:
    state, obs = reset_batch([task], [seed])
    return state, obs[0]


def step(state: EnvState, action) -> tuple[np.ndarray, float, bool]:
    if state.done[0]:
        raise RuntimeError("step called on a finished episode")
    obs, r, d = step_batch(state, np.asarray(action, dtype=float).reshape(1, 2))
    return obs[0], float(r[0]), bool(d[0])


# --------------------------------------------------------------------------
# Scripted expert
# --------------------------------------------------------------------------

def expert_from_arrays(agent: np.ndarray, obj: np.ndarray, goal: np.ndarray, family: np.ndarray,
                       rng: np.random.Generator | None = None, noise: float = EXPERT_NOISE) -> np.ndarray:
    """Proportional controller; push tasks stage behind the object, then push."""
    reach_a = EXPERT_GAIN * (goal - agent)
    d = goal - obj
    u = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-9)
    rel = agent - obj
    along = np.sum(rel * u, axis=1)
    lateral = np.linalg.norm(rel - along[:, None] * u, axis=1)
    aligned = (along < -0.05) & (lateral < 0.03)
    staging = obj - STAGING_OFFSET * u
    approach_a = (staging - agent)
    push_a = EXPERT_GAIN * ((goal - CONTACT_RADIUS * u) - agent)
    a = np.where((family == REACH)[:, None], reach_a, np.where(aligned[:, None], push_a, approach_a))
    if rng is not None and noise > 0:
        a = a + noise * rng.standard_normal(a.shape)
    return np.clip(a, -ACTION_MAX, ACTION_MAX)


def scripted_expert(state: EnvState, task: TaskSpec | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    if state.done.any():
        raise RuntimeError("expert queried on a finished episode")
    fam = state.family if task is None else np.full(len(state), task.family_index)
    out = expert_from_arrays(state.agent, state.obj, state.goal, fam, rng)
    return out[0] if len(state) == 1 else out


def family_from_obs(obs: np.ndarray) -> np.ndarray:
    """Recover the family index from the cue block (reach cues carry a 1 in slot 0)."""
    cue = obs[:, CUE]
    return np.where(cue[:, 0] > 0.5, REACH, np.where(cue[:, 2] < 0, PUSH_LEFT, PUSH_RIGHT))


def expert_policy(seed: int = 0, noise: float = EXPERT_NOISE) -> Callable:
    """Observation-driven wrapper of the expert with its own noise stream."""
    rng = np.random.default_rng([seed, 0xE4])

    def act(obs: np.ndarray, task_ids: np.ndarray | None = None) -> np.ndarray:
        return expert_from_arrays(obs[:, AGENT], obs[:, OBJECT], obs[:, GOAL], family_from_obs(obs), rng, noise)

    return act


def random_policy(seed: int = 0) -> Callable:
    rng = np.random.default_rng([seed, 0xAA])

    def act(obs: np.ndarray, task_ids: np.ndarray | None = None) -> np.ndarray:
        return rng.uniform(-ACTION_MAX, ACTION_MAX, size=(len(obs), ACT_DIM))

    return act


def zero_policy(obs: np.ndarray, task_ids: np.ndarray | None = None) -> np.ndarray:
    return np.zeros((len(obs), ACT_DIM))


# --------------------------------------------------------------------------
# Demonstrations
# --------------------------------------------------------------------------

def h_step_return(rewards: Sequence[float], gamma: float) -> float:
    """Discounted sum of (up to) h per-step rewards; missing steps count as 0."""
    r = np.asarray(rewards, dtype=float)
    return float(np.sum(r * gamma ** np.arange(len(r))))


def discounted_to_go(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


@dataclass
class ChunkView:
    """Chunk-aligned transitions (o_t, a_{t:t+h-1}, r^(h), o_{t+h})."""

    obs: np.ndarray          # (M, OBS_DIM)
    actions: np.ndarray      # (M, h * ACT_DIM)
    reward_h: np.ndarray     # (M,)
    next_obs: np.ndarray     # (M, OBS_DIM)
    done: np.ndarray         # (M,) episode ended inside the chunk
    padded: np.ndarray       # (M,) chunk tail filled by repeating the last action
    n_steps: np.ndarray      # (M,) real steps inside the chunk
    value_mc: np.ndarray     # (M,) discounted return-to-go from o_t
    task_ids: np.ndarray     # (M,)
    episode: np.ndarray      # (M,)
    start_step: np.ndarray   # (M,)

    def __len__(self) -> int:
        return len(self.obs)

    def select(self, mask: np.ndarray) -> ChunkView:
        return ChunkView(**{k: getattr(self, k)[mask] for k in self.__dataclass_fields__})


@dataclass
class DemoDataset:
    """Step-level demonstrations; ``chunks`` derives the chunk-aligned view."""

    obs: np.ndarray          # (N, OBS_DIM), o_t
    actions: np.ndarray      # (N, ACT_DIM)
    rewards: np.ndarray      # (N,)
    dones: np.ndarray        # (N,)
    final_obs: np.ndarray    # (E, OBS_DIM), observation after the last step
    episode_start: np.ndarray  # (E + 1,) offsets into step arrays
    episode_task: np.ndarray   # (E,)
    h: int
    gamma: float
    seed: int

    @property
    def n_episodes(self) -> int:
        return len(self.episode_task)

    def episode_slice(self, e: int) -> slice:
        return slice(int(self.episode_start[e]), int(self.episode_start[e + 1]))

    def chunks(self, h: int | None = None) -> ChunkView:
        h = self.h if h is None else h
        cols = {k: [] for k in ChunkView.__dataclass_fields__}
        for e in range(self.n_episodes):
            sl = self.episode_slice(e)
            obs, act, rew = self.obs[sl], self.actions[sl], self.rewards[sl]
            L = len(rew)
            if not self.dones[sl][-1]:
                raise ValueError(f"episode {e} does not terminate")
            to_go = discounted_to_go(rew, self.gamma)
            for t in range(0, L, h):
                k = min(h, L - t)
                chunk = act[t:t + k]
                if k < h:
                    chunk = np.concatenate([chunk, np.repeat(chunk[-1:], h - k, axis=0)])
                cols["obs"].append(obs[t])
                cols["actions"].append(chunk.reshape(-1))
                cols["reward_h"].append(h_step_return(rew[t:t + k], self.gamma))
                cols["next_obs"].append(obs[t + h] if t + h < L else self.final_obs[e])
                cols["done"].append(t + h >= L)
                cols["padded"].append(k < h)
                cols["n_steps"].append(k)
                cols["value_mc"].append(to_go[t])
                cols["task_ids"].append(self.episode_task[e])
                cols["episode"].append(e)
                cols["start_step"].append(t)
        return ChunkView(**{k: np.asarray(v) for k, v in cols.items()})


def generate_demos(tasks: Sequence[TaskSpec], episodes_per_task: int, chunk_h: int, seed: int,
                   gamma: float = 0.99) -> DemoDataset:
    if episodes_per_task < 1 or chunk_h < 1:
        raise ValueError("episodes_per_task and chunk_h must be >= 1")
    ep_tasks = [t for t in tasks for _ in range(episodes_per_task)]
    ep_seeds = [int(np.random.default_rng([seed, t.task_id, e]).integers(2**31))
                for t in tasks for e in range(episodes_per_task)]
    state, obs = reset_batch(ep_tasks, ep_seeds)
    rng = np.random.default_rng([seed, 0xDE40])
    n = len(ep_tasks)
    traj_obs, traj_act, traj_rew, traj_done = [], [], [], []
    alive_before = []
    while not state.done.all():
        live = ~state.done
        a = expert_from_arrays(state.agent, state.obj, state.goal, state.family, rng)
        a = np.where(live[:, None], a, 0.0)
        traj_obs.append(obs)
        traj_act.append(a)
        alive_before.append(live)
        obs, r, d = step_batch(state, a)
        traj_rew.append(r)
        traj_done.append(d)
    final_obs = obs
    O = np.stack(traj_obs, 1)
    A = np.stack(traj_act, 1)
    R = np.stack(traj_rew, 1)
    D = np.stack(traj_done, 1)
    alive = np.stack(alive_before, 1)
    lengths = alive.sum(1)
    start = np.concatenate([[0], np.cumsum(lengths)])
    return DemoDataset(
        obs=np.concatenate([O[i, :lengths[i]] for i in range(n)]),
        actions=np.concatenate([A[i, :lengths[i]] for i in range(n)]),
        rewards=np.concatenate([R[i, :lengths[i]] for i in range(n)]),
        dones=np.concatenate([D[i, :lengths[i]] for i in range(n)]),
        final_obs=final_obs,
        episode_start=start.astype(np.int64),
        episode_task=np.array([t.task_id for t in ep_tasks], dtype=np.int64),
        h=chunk_h, gamma=gamma, seed=seed,
    )


# Demo file layout (little-endian):
#   magic b"RMXDEMO\0", u32 version,
#   u64 n_steps, u64 n_episodes, u32 h, f64 gamma, u64 seed, u32 obs_dim, u32 act_dim
#   f64[n_steps, obs_dim] obs, f64[n_steps, act_dim] actions, f64[n_steps] rewards,
#   u8[n_steps] dones, f64[n_episodes, obs_dim] final_obs,
#   i64[n_episodes + 1] episode_start, i64[n_episodes] episode_task
DEMO_MAGIC = b"RMXDEMO\0"
DEMO_VERSION = 1


def save_demos(path: str | Path, ds: DemoDataset) -> None:
    n, e = len(ds.rewards), ds.n_episodes
    parts = [DEMO_MAGIC, struct.pack("<IQQIdQII", DEMO_VERSION, n, e, ds.h, ds.gamma, ds.seed, OBS_DIM, ACT_DIM)]
    parts += [np.ascontiguousarray(ds.obs, "<f8").tobytes(), np.ascontiguousarray(ds.actions, "<f8").tobytes(),
              np.ascontiguousarray(ds.rewards, "<f8").tobytes(), np.ascontiguousarray(ds.dones, "u1").tobytes(),
              np.ascontiguousarray(ds.final_obs, "<f8").tobytes(),
              np.ascontiguousarray(ds.episode_start, "<i8").tobytes(),
              np.ascontiguousarray(ds.episode_task, "<i8").tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_demos(path: str | Path) -> DemoDataset:
    raw = Path(path).read_bytes()
    if raw[:8] != DEMO_MAGIC:
        raise ValueError(f"{path}: not a demo file")
    hdr = struct.Struct("<IQQIdQII")
    version, n, e, h, gamma, seed, od, ad = hdr.unpack_from(raw, 8)
    if version != DEMO_VERSION:
        raise ValueError(f"{path}: unsupported demo version {version}")
    off = 8 + hdr.size

    def take(dtype, count, shape):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).reshape(shape)
        off += arr.nbytes
        return arr.copy()

    obs = take("<f8", n * od, (n, od))
    actions = take("<f8", n * ad, (n, ad))
    rewards = take("<f8", n, (n,))
    dones = take("u1", n, (n,)).astype(bool)
    final_obs = take("<f8", e * od, (e, od))
    start = take("<i8", e + 1, (e + 1,))
    etask = take("<i8", e, (e,))
    return DemoDataset(obs, actions, rewards, dones, final_obs, start, etask, h, gamma, seed)


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

def success_rate(policy: Callable, tasks: Sequence[TaskSpec], episodes: int, seed: int) -> dict:
    """Run ``episodes`` seeded episodes per task; return per-task and mean success.

    ``policy(obs, task_ids)`` returns either one primitive action per row
    ``(n, 2)`` or a chunk ``(n, k, 2)`` executed open-loop. Learned policies
    must ignore ``task_ids``; it exists for scripted controllers.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    ep_tasks = [t for t in tasks for _ in range(episodes)]
    ep_seeds = [int(np.random.default_rng([seed, 0xE7A1, e]).integers(2**31))
                for _ in tasks for e in range(episodes)]
    state, obs = reset_batch(ep_tasks, ep_seeds)
    while not state.done.all():
        out = np.asarray(policy(obs, state.task_ids), dtype=float)
        chunk = out.reshape(len(state), -1, ACT_DIM)
        for k in range(chunk.shape[1]):
            obs, _, _ = step_batch(state, chunk[:, k])
            if state.done.all():
                break
    per_task = {t.task_id: float(state.success[i * episodes:(i + 1) * episodes].mean())
                for i, t in enumerate(tasks)}
    return {"per_task": per_task, "mean": float(np.mean(list(per_task.values())))}
