"""Run directories and the stage entry points shared by the CLI and tests.

A run directory is ``<root>/<config-hash>-s<seed>`` and holds the resolved
config, the seed, demonstrations, checkpoints and one metrics stream per
stage. Every artifact is a pure function of (config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .base_policy import base_policy_fn, pretrain
from .config import RunConfig
from .core import ParamMap, load_checkpoint, save_checkpoint
from .metrics import MetricsWriter
from .model import STAGE1_TAG, STAGE2_TAG, ModelSpec, build_stage1, dtype_of
from .taskworld import DemoDataset, TaskSpec, conflicting_suite, default_suite, generate_demos, load_demos, \
    save_demos, success_rate
from .trainer import Trainer, eval_seed, residual_policy_fn

DEMOS = "demos.bin"
STAGE1 = "stage1.ckpt"
WARMUP = "warmup.ckpt"
STAGE2 = "stage2.ckpt"
LAST_GOOD = "last_good.ckpt"

SUITES = {"default": default_suite, "conflicting": lambda: conflicting_suite(default_suite())}


class MissingArtifact(FileNotFoundError):
    """An upstream stage has not produced its output yet."""


def suite(name: str) -> list[TaskSpec]:
    try:
        return SUITES[name]()
    except KeyError:
        raise ValueError(f"unknown suite {name!r}") from None


@dataclass
class RunDir:
    root: Path
    cfg: RunConfig

    @classmethod
    def create(cls, out: str | Path, cfg: RunConfig) -> RunDir:
        path = Path(out) / f"{cfg.run_hash()}-s{cfg.seed}"
        path.mkdir(parents=True, exist_ok=True)
        cfg.save(path / "config.yaml")
        (path / "seed").write_text(f"{cfg.seed}\n")
        return cls(path, cfg)

    def file(self, name: str) -> Path:
        return self.root / name

    def need(self, name: str, what: str) -> Path:
        p = self.file(name)
        if not p.exists():
            raise MissingArtifact(f"missing {what}: {p}")
        return p

    def metrics(self, stage: str, echo: bool = False) -> MetricsWriter:
        return MetricsWriter(self.file(f"metrics_{stage}.jsonl"), echo)

    def demos(self) -> DemoDataset:
        return load_demos(self.need(DEMOS, "demonstrations (run gen-demos first)"))

    def stage1(self) -> ParamMap:
        params, header = load_checkpoint(self.need(STAGE1, "checkpoint (Stage I; run pretrain first)"),
                                         dtype_of(self.cfg))
        if header.tag != STAGE1_TAG:
            raise ValueError(f"{STAGE1} carries tag {header.tag!r}")
        return params

    def stage2(self) -> ParamMap:
        params, _ = load_checkpoint(self.need(STAGE2, "checkpoint (Stage II; run finetune first)"),
                                    dtype_of(self.cfg))
        return params


def gen_demos(run: RunDir) -> DemoDataset:
    cfg = run.cfg
    ds = generate_demos(suite(cfg.suite), cfg.demos_per_task, cfg.h, cfg.seed, cfg.gamma)
    save_demos(run.file(DEMOS), ds)
    return ds


def pretrain_stage(run: RunDir, echo: bool = False) -> ParamMap:
    cfg = run.cfg
    ds = run.demos()
    spec = ModelSpec.from_config(cfg, len(suite(cfg.finetune_suite)))
    params = build_stage1(spec, cfg.seed, dtype_of(cfg))
    with run.metrics("pretrain", echo) as m:
        pretrain(params, spec.enc, spec.pol, spec.dv, ds.chunks(cfg.h), cfg.n_off, cfg.batch_off, cfg.lr_off,
                 cfg.lr_dv, cfg.lambda_ib, cfg.seed, m, cfg.log_every, cfg.max_grad_norm)
    save_checkpoint(run.file(STAGE1), params, cfg.seed, STAGE1_TAG)
    return params


def make_trainer(run: RunDir, metrics: MetricsWriter | None = None) -> Trainer:
    cfg = run.cfg
    stage1 = run.stage1()
    ds = run.demos()
    tasks = suite(cfg.finetune_suite)
    spec = ModelSpec.from_config(cfg, len(tasks))
    return Trainer(stage1.copy(), spec, cfg, tasks, ds.chunks(cfg.h), metrics, stage1=stage1)


def warmup_stage(run: RunDir, echo: bool = False) -> Trainer:
    with run.metrics("warmup", echo) as m:
        tr = make_trainer(run, m)
        tr.warmup(run.cfg.warmup_steps)
    save_checkpoint(run.file(WARMUP), tr.params, run.cfg.seed, STAGE2_TAG)
    return tr


def finetune_stage(run: RunDir, echo: bool = False) -> tuple[Trainer, dict]:
    cfg = run.cfg
    with run.metrics("finetune", echo) as m:
        tr = make_trainer(run, m)
        tr.warmup(cfg.warmup_steps)
        result = tr.run(cfg.n_on, run.root)
    save_checkpoint(run.file(STAGE2), tr.params, cfg.seed, STAGE2_TAG)
    return tr, result


def eval_stage(run: RunDir, which: str = "auto", episodes: int | None = None) -> tuple[str, dict]:
    """Per-task success of the Stage I base or the composed Stage II policy."""
    cfg = run.cfg
    if which == "auto":
        which = "stage2" if run.file(STAGE2).exists() else "stage1"
    tasks = suite(cfg.finetune_suite)
    spec = ModelSpec.from_config(cfg, len(tasks))
    if which == "stage1":
        params = run.stage1()
        policy = base_policy_fn(params, spec.enc, spec.pol)
    elif which == "stage2":
        params = run.stage2()
        policy = residual_policy_fn(params, spec)
    else:
        raise ValueError(f"unknown checkpoint {which!r}")
    res = success_rate(policy, tasks, episodes or cfg.eval_episodes, eval_seed(cfg.seed))
    with run.metrics(f"eval_{which}") as m:
        for tid, v in res["per_task"].items():
            m.log(0, "eval", "success", v, tid)
        m.log(0, "eval", "success_mean", res["mean"])
    lines = ["task_id\tfamily\tsuccess"]
    fam = {t.task_id: t.family for t in tasks}
    lines += [f"{tid}\t{fam[tid]}\t{v:.4f}" for tid, v in res["per_task"].items()]
    lines.append(f"mean\t-\t{res['mean']:.4f}")
    run.file(f"eval_{which}.txt").write_text("\n".join(lines) + "\n")
    return which, res

