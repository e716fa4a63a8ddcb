from __future__ import annotations

import time
from contextlib import contextmanager
from pathlib import Path

import pytest

from ddto.cli import load_scenario

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"
DATA = Path(__file__).resolve().parent / "data"
CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[CRITERIA] = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in range(1, max(9, *lines) + 1):
            terminalreporter.write_line(lines.get(n, f"C{n} FAIL  not run (fixture error or deselected)"))


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line per acceptance criterion.

    The body may fill the yielded dict with measurements; they are appended to
    the line.  ``extra`` seconds (work done in shared fixtures) count towards
    the reported runtime.
    """
    store = request.config.stash[CRITERIA]

    @contextmanager
    def run(n: int, title: str, extra: float = 0.0):
        info: dict = {}
        t0 = time.perf_counter()
        status = "FAIL"
        try:
            yield info
            status = "PASS"
        finally:
            secs = time.perf_counter() - t0 + extra
            detail = ", ".join(f"{k}={v}" for k, v in info.items())
            line = f"C{n} {status}  {title}  [{secs:.1f} s]" + (f"  {detail}" if detail else "")
            store[n] = line
            print(line)

    return run


@pytest.fixture(scope="session")
def convex_path() -> Path:
    return SCENARIOS / "quad_convex.json"


@pytest.fixture(scope="session")
def nonconvex_path() -> Path:
    return SCENARIOS / "quad_nonconvex.json"


@pytest.fixture(scope="session")
def small_scp_path() -> Path:
    return DATA / "small_scp.json"


@pytest.fixture(scope="session")
def convex_problem():
    return load_scenario(SCENARIOS / "quad_convex.json").problem


@pytest.fixture(scope="session")
def nonconvex_problem():
    ls = load_scenario(SCENARIOS / "quad_nonconvex.json")
    return ls.problem, ls.data


@pytest.fixture(scope="session")
def convex_tree(convex_problem):
    from ddto.qcvx import run_ddto_qcvx

    t0 = time.perf_counter()
    tree = run_ddto_qcvx(convex_problem)
    return tree, time.perf_counter() - t0


@pytest.fixture(scope="session")
def nonconvex_tree(nonconvex_problem):
    """The full nonconvex run takes a few minutes, so it is shared across modules."""
    from ddto.scp import ScpConfig, run_ddto_scp

    sc, data = nonconvex_problem
    cfg = ScpConfig(**data["scp"]["config"])
    t0 = time.perf_counter()
    tree = run_ddto_scp(sc, data["scp"]["N"], cfg)
    return tree, cfg, time.perf_counter() - t0
