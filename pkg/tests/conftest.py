import logging

import numpy as np
import pytest

from lfdiff import fem
from lfdiff.mesh import build_disk_mesh


@pytest.fixture(scope="session")
def tiny_mesh():
    """126 nodes; dense eigensolver path."""
    return build_disk_mesh(h_max=0.2)


@pytest.fixture(scope="session")
def small_mesh():
    """462 nodes; iterative eigensolver path."""
    return build_disk_mesh(h_max=0.1)


@pytest.fixture(scope="session")
def fine_mesh():
    return build_disk_mesh(h_max=0.05)


@pytest.fixture(scope="session")
def tiny_mass(tiny_mesh):
    return fem.assemble_mass(tiny_mesh)


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture(autouse=True)
def _quiet_clamp_warnings(caplog):
    caplog.set_level(logging.ERROR, logger="lfdiff.kernel")


# acceptance criteria: one PASS/FAIL line each in the terminal summary
_CRITERIA = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    detail = dict(item.user_properties).get("detail", "")
    _CRITERIA.append((marker.args[0], marker.args[1], rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(_CRITERIA):
        terminalreporter.write_line(f"CRITERION {number} {'PASS' if passed else 'FAIL'}  {name}  {detail}")
