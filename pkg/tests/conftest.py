import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from private_ate.core import Dataset  # noqa: E402

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def random_dataset(rng: np.random.Generator, n: int, d: int, B: float = 2.0) -> Dataset:
    """Random valid dataset with both arms present and outcomes in [-B/2, B/2]."""
    while True:
        t = rng.integers(0, 2, n)
        if 0 < t.sum() < n:
            break
    X = rng.uniform(size=(n, d))
    y = rng.uniform(-B / 2, B / 2, n)
    return Dataset.from_arrays(t, X, y, B)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    label = getattr(item.function, "criterion", None)
    if label is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _ACCEPTANCE[item.nodeid] = (label, status)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    def order(item):
        head = item[0].split(":")[0].split()
        return (int(head[1]) if len(head) > 1 and head[1].isdigit() else 0, item[0])

    for label, status in sorted(_ACCEPTANCE.values(), key=order):
        terminalreporter.write_line(f"{status}  {label}")
