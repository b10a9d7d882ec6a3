import numpy as np
import pytest
from hypothesis import settings

from chronosurv.cohort import generate_cohort
from chronosurv.config import CohortConfig

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=60)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def small_cohort():
    return generate_cohort(CohortConfig(n=12), seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Record the verdict line of one acceptance criterion (number parsed from the test name)."""
    number = int(request.node.name.split("_")[2])

    def record(ok, detail=""):
        ACCEPTANCE[number] = (bool(ok), detail)
        return ok

    yield record
    ACCEPTANCE.setdefault(number, (False, "raised before a verdict was recorded"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
