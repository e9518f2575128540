import os
from pathlib import Path

import numpy as np
import pytest

from dartslab import data, oracle
from dartslab import space as S

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory) -> Path:
    """Shared dataset/oracle cache; set DARTSLAB_CACHE to reuse one across sessions."""
    env = os.environ.get("DARTSLAB_CACHE")
    if env:
        p = Path(env)
        p.mkdir(parents=True, exist_ok=True)
        return p
    return tmp_path_factory.mktemp("cache")


@pytest.fixture(scope="session")
def task() -> data.Dataset:
    return data.generate(data.DatasetSpec())


@pytest.fixture(scope="session")
def small_task() -> data.Dataset:
    return data.generate(data.DatasetSpec(n_train=256, n_val=64, n_test=64))


@pytest.fixture(scope="session")
def micro_table(task, cache_dir) -> oracle.OracleTable:
    return oracle.evaluate_all(S.MICRO, task, cache_dir=cache_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
