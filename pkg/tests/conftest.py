import os
from pathlib import Path

import numpy as np
import pytest

from mixbench.synthetic import telemonitoring_like

ROOT = Path(__file__).resolve().parents[1]

# criterion id -> list of (label, passed, detail); filled by test_acceptance
ACCEPTANCE = {}


def real_data_path():
    """Location of the UCI telemonitoring CSV, or None if it is not available."""
    for cand in (os.environ.get("MIXBENCH_DATA"), ROOT / "data" / "parkinsons_updrs.data"):
        if cand and Path(cand).is_file():
            return Path(cand)
    return None


@pytest.fixture(scope="session")
def synthetic_panel():
    return telemonitoring_like(n_subjects=42, seed=0)


@pytest.fixture(scope="session")
def small_panel():
    return telemonitoring_like(n_subjects=12, rows_per_subject=(20, 30), seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split(".")[0]), k)):
        for label, ok, detail in ACCEPTANCE[key]:
            terminalreporter.write_line(f"criterion {key:<5} {'PASS' if ok else 'FAIL'}  {label}: {detail}")
