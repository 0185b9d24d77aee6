import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).resolve().parent))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")

GOLDEN = Path(__file__).resolve().parent / "golden"


@pytest.fixture(scope="session")
def golden():
    return GOLDEN


@pytest.fixture(scope="session")
def small_scene():
    from gazeforge.simscene import gen_scene
    return gen_scene(5, n_objects=8, W=256, H=128)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion
_CRITERIA: dict = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or report.outcome != "passed":
        name = report.nodeid.split("::")[-1]
        prev = _CRITERIA.get(name)
        if prev is None or prev[0] == "PASS":
            _CRITERIA[name] = ("PASS" if report.outcome == "passed" else "FAIL", report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        status, dur = _CRITERIA[name]
        num, *words = name[len("test_criterion_"):].split("_")
        terminalreporter.write_line(f"criterion {int(num):2d} {' '.join(words):<24} {status}  ({dur:.1f}s)")
