import pytest
from hypothesis import settings

from esln import BathSpec, TimeGrid, build_filters, eval_kernels

# first calls pay for loading compiled kernels
settings.register_profile("esln", deadline=None)
settings.load_profile("esln")


@pytest.fixture(scope="session")
def coarse_bath():
    return BathSpec(0.05, 20.0, 1.0)


@pytest.fixture(scope="session")
def coarse_grid():
    return TimeGrid.from_span(0.0, 1.0, 1e-2, 1.0, 1e-2)


@pytest.fixture(scope="session")
def coarse_kernels(coarse_bath, coarse_grid):
    return eval_kernels(coarse_bath, coarse_grid)


@pytest.fixture(scope="session")
def coarse_filters(coarse_kernels, coarse_grid):
    return build_filters(coarse_kernels, coarse_grid)


CRITERIA_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one ``CRITERION n: PASS/FAIL`` line and return the recorder."""
    lines = request.config.stash.setdefault(CRITERIA_KEY, [])

    def record(number, ok, detail):
        lines.append((number, f"CRITERION {number}: {'PASS' if ok else 'FAIL'} {detail}"))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(CRITERIA_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda x: x[0]):
            terminalreporter.write_line(line)
