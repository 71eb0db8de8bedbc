import json
from pathlib import Path

import pytest

from panelselect.data import build_design_matrices
from panelselect.dgp import DEFAULT_PARAMS, simulate_panel

ORACLES = Path(__file__).parent / "oracles"


@pytest.fixture(scope="session")
def normal_oracles():
    return json.loads((ORACLES / "normal_values.json").read_text())


@pytest.fixture(scope="session")
def small_panel():
    return simulate_panel(DEFAULT_PARAMS, 400, seed=11)


@pytest.fixture(scope="session")
def small_design(small_panel):
    return build_design_matrices(small_panel, DEFAULT_PARAMS.model_spec())


# acceptance results, filled by tests/test_acceptance.py: (number, title, passed, detail)
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {number}. {title}: {detail}")
