"""Figures and delimited tables from metrics streams.

Each figure is written next to a TSV holding exactly the plotted series,
so numbers can be read without the image.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import read_jsonl  # noqa: E402

# (stream, kind, figure name, title, y label)
PANELS = [
    ("pretrain", "stage1", "pretrain_losses", "Offline pretraining", "value"),
    ("finetune", "eval", "finetune_success", "Online evaluation success", "success rate"),
    ("finetune", "router", "router_usage", "Average routing probability", "probability"),
    ("finetune", "update", "finetune_losses", "Online losses", "value"),
    ("probe", "probe", "forgetting_probe", "Probe-task success", "success rate"),
]


def collect_series(records: list[dict], kind: str) -> dict[str, list[tuple[int, float]]]:
    """Group records of one kind into named series; per-task series get a ``@task`` suffix."""
    out: dict[str, list[tuple[int, float]]] = defaultdict(list)
    for r in records:
        if r["kind"] != kind or not isinstance(r["value"], (int, float)):
            continue
        name = r["name"] if "task_id" not in r else f"{r['name']}@{r['task_id']}"
        out[name].append((r["step"], float(r["value"])))
    return dict(sorted(out.items()))


def write_tsv(path: Path, series: dict[str, list[tuple[int, float]]]) -> None:
    lines = ["series\tstep\tvalue"]
    for name, pts in series.items():
        lines += [f"{name}\t{s}\t{v:.6g}" for s, v in pts]
    path.write_text("\n".join(lines) + "\n")


def plot_series(path: Path, series: dict[str, list[tuple[int, float]]], title: str, ylabel: str,
                xlabel: str = "step") -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, pts in series.items():
        if name.startswith("select_count"):
            continue
        xs, ys = zip(*pts)
        ax.plot(xs, ys, label=name, lw=1.4 if "mean" in name else 0.9)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) <= 12:
        ax.legend(fontsize=7, ncol=2)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes stable across reruns
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def render_report(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Render every panel whose metrics stream exists in ``run_dir``; returns written paths."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for stream, kind, name, title, ylabel in PANELS:
        src = run_dir / f"metrics_{stream}.jsonl"
        if not src.exists():
            continue
        series = collect_series(read_jsonl(src), kind)
        if not series:
            continue
        tsv, png = out_dir / f"{name}.tsv", out_dir / f"{name}.png"
        write_tsv(tsv, series)
        plot_series(png, series, title, ylabel, "episode" if kind in ("eval", "probe") else "step")
        written += [tsv, png]
    return written
