import pytest
import torch

from mmdst.scene import build_universe, generate_scene

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def universe():
    return build_universe(193)


@pytest.fixture(scope="session")
def universe_270():
    return build_universe(270)


@pytest.fixture(scope="session")
def scene(universe_270):
    return generate_scene(universe_270, 300, 8, seed=7)


def pytest_terminal_summary(terminalreporter):
    import acceptance_runs

    failed = {r.nodeid for r in terminalreporter.stats.get("failed", [])}
    lines = dict(acceptance_runs.RESULTS)
    for nodeid in failed:
        if "test_acceptance.py::test_criterion_" in nodeid:
            n = int(nodeid.split("test_criterion_")[1][:2])
            lines.setdefault(n, f"criterion {n:>2}: FAIL  raised before reporting, see traceback")
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
