import contextlib
import hashlib
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest

from trio_fundus.cli import main as cli_main

ROOT = Path(__file__).resolve().parents[1]
DESK_CFG = ROOT / "configs" / "desk_scale.cfg"
E2E_IMAGES = 300

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    num, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        prev = _criteria.get(num, (title, "PASS"))[1]
        status = "PASS" if rep.passed and prev == "PASS" else "FAIL"
        _criteria[num] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        title, status = _criteria[num]
        terminalreporter.write_line(f"{status}  criterion {num:>2}: {title}")


@contextlib.contextmanager
def chdir(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


def tree_hashes(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def cli(*args: str) -> int:
    return cli_main([*args[:1], "--config", str(DESK_CFG), "--single-threaded", *args[1:]])


@dataclass
class DeskRun:
    root: Path
    seconds: float
    hashes: dict[str, str] = field(default_factory=dict)
    probe_image: str = "data/5.png"


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory) -> DeskRun:
    """synth -> prepare -> train both diseases -> eval -> predict, run through the CLI."""
    root = tmp_path_factory.mktemp("desk_run")
    os.environ.pop("TRIO_FUNDUS_CACHE", None)
    with chdir(root):
        t0 = time.perf_counter()
        assert cli("synth", "--n", str(E2E_IMAGES), "--diseases", "DN,MYA") == 0
        assert cli("prepare") == 0
        assert cli("train", "--disease", "DN") == 0
        assert cli("train", "--disease", "MYA") == 0
        assert cli("eval", "--split", "test") == 0
        seconds = time.perf_counter() - t0
        assert cli("predict", "data/5.png", "--all", "--jsonl", "out/predict.jsonl") == 0
    return DeskRun(root, seconds, tree_hashes(root))
