import dataclasses
from types import SimpleNamespace

import numpy as np
import pytest

from marlqa.taskgen import CATEGORIES, GenConfig, generate_dataset


@pytest.fixture(scope="session")
def small_dataset():
    cfg = dataclasses.replace(GenConfig(), categories=tuple((c, 12) for c in CATEGORIES))
    return SimpleNamespace(cfg=cfg, data=generate_dataset(cfg, 0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
