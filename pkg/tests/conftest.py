import pytest

from tokencirc.graph import DynamicGraphProcess, StaticGraph, complete_graph, cycle_graph, path_graph


@pytest.fixture
def k3() -> StaticGraph:
    return complete_graph(3)


@pytest.fixture
def k5() -> StaticGraph:
    return complete_graph(5)


@pytest.fixture
def path3() -> StaticGraph:
    return path_graph(3)


@pytest.fixture
def c4() -> StaticGraph:
    return cycle_graph(4)


@pytest.fixture
def blinking() -> DynamicGraphProcess:
    # triangle whose 0-2 edge blinks on and off
    return DynamicGraphProcess([complete_graph(3), path_graph(3)], [[0.5, 0.5], [0.5, 0.5]])


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
