"""Command-line driver.

    resmix [--config FILE] [--seed N] [--out DIR] [--set key=value ...] <command> [options]

Exit status: 0 success, 1 invalid configuration, 2 missing upstream artifact
or bad usage, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import pipeline as P
from .config import FIELD_DOCS, ConfigError, RunConfig
from .model import ModelSpec

OUT_ENV = "RESMIX_OUT"
EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 1, 2, 3


def parse_overrides(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    return out


def resolve_config(args) -> RunConfig:
    data = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a flat key/value mapping")
        data.update(loaded)
    data.update(parse_overrides(args.set))
    if args.seed is not None:
        data["seed"] = args.seed
    return RunConfig.from_dict(data)


def say(args, *msg) -> None:
    if not args.quiet:
        print(*msg)


def print_table(header: list[str], rows: list[list]) -> None:
    print("\t".join(header))
    for r in rows:
        print("\t".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in r))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_demos(args, run: P.RunDir) -> int:
    ds = P.gen_demos(run)
    say(args, f"wrote {ds.n_episodes} episodes ({len(ds.rewards)} steps) to {run.file(P.DEMOS)}")
    return 0


def cmd_pretrain(args, run: P.RunDir) -> int:
    P.pretrain_stage(run, echo=args.verbose)
    say(args, f"wrote {run.file(P.STAGE1)}")
    return 0


def cmd_warmup(args, run: P.RunDir) -> int:
    P.warmup_stage(run, echo=args.verbose)
    say(args, f"wrote {run.file(P.WARMUP)}")
    return 0


def cmd_finetune(args, run: P.RunDir) -> int:
    _, res = P.finetune_stage(run, echo=args.verbose)
    say(args, f"wrote {run.file(P.STAGE2)}; final mean success {res['mean']:.4f}")
    return 0


def cmd_eval(args, run: P.RunDir) -> int:
    which, res = P.eval_stage(run, args.checkpoint, args.episodes)
    if not args.quiet:
        print(run.file(f"eval_{which}.txt").read_text(), end="")
    return 0


def cmd_diagnose_gradients(args, run: P.RunDir) -> int:
    from .diagnostics import diagnose_gradients, family_groups
    cfg = run.cfg
    tasks = P.suite(args.suite or cfg.finetune_suite)
    reports = diagnose_gradients(run.stage1(), cfg, tasks, run.demos().chunks(cfg.h), args.variant,
                                 args.warmup_steps, args.batch)
    groups = family_groups(tasks)
    with run.metrics("gradients") as m:
        for rep in reports:
            lines = ["task\t" + "\t".join(map(str, rep.tasks))]
            lines += [f"{t}\t" + "\t".join(f"{v:.6f}" for v in row) for t, row in zip(rep.tasks, rep.matrix)]
            run.file(f"conflict_{rep.variant}.tsv").write_text("\n".join(lines) + "\n")
            for key, val in rep.group_summary(groups).items():
                m.log(0, f"conflict:{rep.variant}", key, val)
            if not args.quiet:
                print(f"# {rep.variant}")
                print("\n".join(lines))
                for key, val in rep.group_summary(groups).items():
                    print(f"{key}\t{val:.4f}")
    return 0


def cmd_forgetting_probe(args, run: P.RunDir) -> int:
    from .diagnostics import forgetting_probe
    cfg = run.cfg
    tasks = {t.task_id: t for t in P.suite("default")}
    probe_ids = [int(x) for x in args.probe_tasks.split(",")]
    unknown = [t for t in [args.train_task] + probe_ids if t not in tasks]
    if unknown:
        raise ValueError(f"unknown task id(s) {unknown}")
    if args.train_task in probe_ids:
        raise ValueError("train task overlaps the probe tasks")
    with run.metrics("probe", args.verbose) as m:
        series = forgetting_probe(run.stage1(), cfg, run.demos().chunks(cfg.h), tasks[args.train_task],
                                  [tasks[t] for t in probe_ids], args.mode, args.episodes, metrics=m)
    rows = series.rows()
    header = list(rows[0])
    lines = ["\t".join(header)] + ["\t".join(str(r[k]) for k in header) for r in rows]
    run.file(f"probe_{args.mode}.tsv").write_text("\n".join(lines) + "\n")
    if not args.quiet:
        print("\n".join(lines))
        print(f"max_degradation_points\t{float(np.max(series.degradation())):.2f}")
        print(f"final_degradation_points\t{float(series.degradation()[-1]):.2f}")
    return 0


def cmd_expert_sweep(args, run: P.RunDir) -> int:
    from .diagnostics import expert_sweep, sweep_table
    cfg = run.cfg
    counts = [int(c) for c in args.counts.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    stage1, chunks = {}, {}
    for s in seeds:
        r = P.RunDir.create(args.out, cfg.replace(seed=s))
        stage1[s] = r.stage1()
        chunks[s] = r.demos().chunks(cfg.h)
    tasks = P.suite(args.suite or cfg.finetune_suite)
    with run.metrics("sweep") as m:
        rows = expert_sweep(stage1, cfg, counts, tasks, chunks, m)
    header = list(rows[0])
    lines = ["\t".join(header)] + ["\t".join(str(r[k]) for k in header) for r in rows]
    run.file("sweep.tsv").write_text("\n".join(lines) + "\n")
    if not args.quiet:
        print("\n".join(lines))
        print_table(["n_experts", "mean_success"], [[c, v] for c, v in sweep_table(rows).items()])
    return 0


def cmd_export_embeddings(args, run: P.RunDir) -> int:
    from .diagnostics import collect_embeddings, format_embeddings, prototype_accuracy
    cfg = run.cfg
    tasks = P.suite(cfg.finetune_suite)
    spec = ModelSpec.from_config(cfg, len(tasks))
    params = run.stage2()
    rows = collect_embeddings(params, spec, tasks, args.episodes, cfg.seed + 1)
    out = run.file("embeddings.txt")
    out.write_text(format_embeddings(rows))
    acc = prototype_accuracy(params, rows, {t.task_id: i for i, t in enumerate(tasks)})
    with run.metrics("embeddings") as m:
        m.log(0, "embeddings", "prototype_accuracy", acc)
        m.log(0, "embeddings", "rows", len(rows))
    say(args, f"wrote {len(rows)} rows to {out}\nprototype_accuracy\t{acc:.4f}")
    return 0


def cmd_estimate_mi(args, run: P.RunDir) -> int:
    from .ib import correlated_gaussians, gaussian_mi, train_mi_estimator
    cfg = run.cfg
    with run.metrics(f"mi_{args.source}") as m:
        if args.source == "gaussian":
            x, z = correlated_gaussians(args.rho, args.samples, cfg.seed)
            est, _ = train_mi_estimator(x, z, args.steps, seed=cfg.seed, metrics=m)
            m.log(args.steps, "mi", "analytic", gaussian_mi(args.rho))
            say(args, f"rho\t{args.rho}\ndv_estimate\t{est:.4f}\nanalytic\t{gaussian_mi(args.rho):.4f}")
        else:
            import torch
            from .encoder import encode
            spec = ModelSpec.from_config(cfg, len(P.suite(cfg.finetune_suite)))
            params = run.stage1()
            obs = run.demos().chunks(cfg.h).obs[:args.samples]
            with torch.no_grad():
                rng = np.random.default_rng([cfg.seed, 0x31])
                z = encode(params, spec.enc, torch.as_tensor(obs), "sample", rng, with_task=False).z.numpy()
            est, _ = train_mi_estimator(obs, z, args.steps, seed=cfg.seed, metrics=m)
            say(args, f"samples\t{len(obs)}\ndv_estimate_I(O;Z)\t{est:.4f}")
    return 0


def cmd_report(args, run: P.RunDir) -> int:
    from .plotting import render_report
    paths = render_report(run.root, args.report_dir)
    for p in paths:
        say(args, str(p))
    if not paths:
        say(args, "no metrics streams found")
    return 0


def cmd_config(args, run: P.RunDir) -> int:
    if args.keys:
        for k, doc in FIELD_DOCS.items():
            print(f"{k}\t{getattr(run.cfg, k)!r}\t{doc}")
    else:
        print(run.cfg.dumps(), end="")
    return 0


COMMANDS = {
    "gen-demos": cmd_gen_demos,
    "pretrain": cmd_pretrain,
    "warmup": cmd_warmup,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "diagnose-gradients": cmd_diagnose_gradients,
    "forgetting-probe": cmd_forgetting_probe,
    "expert-sweep": cmd_expert_sweep,
    "export-embeddings": cmd_export_embeddings,
    "estimate-mi": cmd_estimate_mi,
    "report": cmd_report,
    "config": cmd_config,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="resmix", description=__doc__.split("\n\n")[0])
    ap.add_argument("--config", help="flat YAML config file")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--out", default=os.environ.get(OUT_ENV, "runs"), help=f"run root (default ${OUT_ENV} or ./runs)")
    ap.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    ap.add_argument("--quiet", action="store_true")
    ap.add_argument("--verbose", action="store_true", help="echo metrics records")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("gen-demos", "pretrain", "warmup", "finetune"):
        sub.add_parser(name)
    p = sub.add_parser("eval")
    p.add_argument("--checkpoint", choices=("auto", "stage1", "stage2"), default="auto")
    p.add_argument("--episodes", type=int)
    p = sub.add_parser("diagnose-gradients")
    p.add_argument("--variant", choices=("both", "single-expert", "morr"), default="both")
    p.add_argument("--suite", choices=sorted(P.SUITES))
    p.add_argument("--warmup-steps", type=int)
    p.add_argument("--batch", type=int, default=256)
    p = sub.add_parser("forgetting-probe")
    p.add_argument("--mode", choices=("full-finetune", "residual"), required=True)
    p.add_argument("--train-task", type=int, default=4)
    p.add_argument("--probe-tasks", default="5,6,7")
    p.add_argument("--episodes", type=int)
    p = sub.add_parser("expert-sweep")
    p.add_argument("--counts", default="1,8")
    p.add_argument("--seeds", help="comma-separated; each needs a pretrained run directory")
    p.add_argument("--suite", choices=sorted(P.SUITES))
    p = sub.add_parser("export-embeddings")
    p.add_argument("--episodes", type=int, default=5)
    p = sub.add_parser("estimate-mi")
    p.add_argument("--source", choices=("gaussian", "encoder"), default="gaussian")
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--samples", type=int, default=20000)
    p.add_argument("--steps", type=int, default=2000)
    p = sub.add_parser("report")
    p.add_argument("--report-dir")
    p = sub.add_parser("config")
    p.add_argument("--keys", action="store_true", help="list every key with its value and meaning")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (ConfigError, TypeError, yaml.YAMLError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    run = P.RunDir(Path(args.out), cfg) if args.command == "config" else P.RunDir.create(args.out, cfg)
    try:
        return COMMANDS[args.command](args, run)
    except P.MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except FloatingPointError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
