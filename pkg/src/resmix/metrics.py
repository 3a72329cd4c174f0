from __future__ import annotations

import json
from pathlib import Path


class MetricsWriter:
    """Append-only JSONL stream; one complete record per line.

    Records carry no wall-clock fields so reruns are byte-identical.
    """

    def __init__(self, path: str | Path | None = None, echo: bool = False):
        self.path = Path(path) if path else None
        self.echo = echo
        self.records: list[dict] = []
        self._fh = open(self.path, "w") if self.path else None

    def log(self, step: int, kind: str, name: str, value, task_id: int | None = None) -> None:
        rec = {"step": int(step), "kind": kind, "name": name, "value": _plain(value)}
        if task_id is not None:
            rec["task_id"] = int(task_id)
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if self.echo:
            print(f"[{kind}] step={step} {name}={rec['value']}" + (f" task={task_id}" if task_id is not None else ""))

    def series(self, kind: str, name: str, task_id: int | None = None) -> list[tuple[int, float]]:
        return [(r["step"], r["value"]) for r in self.records
                if r["kind"] == kind and r["name"] == name and r.get("task_id") == task_id]

    def __enter__(self) -> MetricsWriter:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def _plain(v):
    if hasattr(v, "item"):
        v = v.item()
    if isinstance(v, float):
        return float(v)
    return v


def read_jsonl(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
