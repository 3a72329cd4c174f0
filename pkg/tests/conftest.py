import numpy as np
import pytest
import torch

from resmix.config import RunConfig
from resmix.model import ModelSpec, add_stage2, build_stage1
from resmix.taskworld import default_suite, generate_demos


@pytest.fixture(scope="session")
def tiny_cfg():
    return RunConfig(hidden_width=16, hidden_layers=2, d_z=8, d_e=4, n_experts=4, top_m=2,
                     demos_per_task=3, batch_size=16, warmup_steps=2, n_on=2, updates_per_rollout=1,
                     eval_every=1, eval_episodes=1)


@pytest.fixture(scope="session")
def tiny_demos(tiny_cfg):
    return generate_demos(default_suite(), tiny_cfg.demos_per_task, tiny_cfg.h, seed=3)


@pytest.fixture
def tiny_model(tiny_cfg):
    """Stage I + Stage II parameters for small networks (gradient checks, plumbing)."""
    spec = ModelSpec.from_config(tiny_cfg, 8)
    params = build_stage1(spec, 0)
    add_stage2(params, spec, 0)
    return params, spec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=float))


# ---- acceptance reporting --------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}
ACCEPTANCE_NAMES = {
    1: "gradient correctness", 2: "MI oracle", 3: "router invariants", 4: "load balancing",
    5: "contrastive separation", 6: "critic oracle", 7: "frozen-base invariant", 8: "end-to-end improvement",
    9: "expert scaling", 10: "conflict mitigation", 11: "forgetting probe", 12: "determinism",
}


@pytest.fixture
def criterion():
    """record(n, ok, detail) stores the verdict for the summary, then asserts it."""

    def record(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[n] = (bool(ok), detail)
        assert ok, f"criterion {n} ({ACCEPTANCE_NAMES[n]}): {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not any(r.nodeid.startswith("tests/test_acceptance.py") or "test_acceptance" in r.nodeid
               for key in ("passed", "failed", "error") for r in terminalreporter.stats.get(key, [])):
        return
    terminalreporter.section("acceptance criteria")
    broken = [r.nodeid for key in ("failed", "error") for r in terminalreporter.stats.get(key, [])]
    for n, name in ACCEPTANCE_NAMES.items():
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            tag = "PASS" if ok else "FAIL"
        elif any(f"test_c{n:02d}_" in nodeid for nodeid in broken):
            tag, detail = "FAIL", "errored before a verdict"
        else:
            tag, detail = "NOT RUN", "deselected"
        terminalreporter.write_line(f"[{tag}] {n:2d} {name}: {detail}")
