import pytest

from heavybrw.kernel import build_branching, build_kernel

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def k1_half():
    return build_kernel(1, 0.5)


@pytest.fixture(scope="session")
def k1_one():
    return build_kernel(1, 1.0)


@pytest.fixture(scope="session")
def k1_three_halves():
    return build_kernel(1, 1.5)


@pytest.fixture(scope="session")
def k3_one():
    return build_kernel(3, 1.0)


@pytest.fixture(scope="session")
def binary_law():
    return build_branching({0: 1.0, 2: 1.0})


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
