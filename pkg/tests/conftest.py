import numpy as np
import pytest

from dazzlesim.config import desk_config, gradcheck_config

CRITERIA = {
    1: "Airy first-minimum radius",
    2: "PSF energy conservation",
    3: "saturation identity",
    4: "I_sat formula and monotonicity",
    5: "gradient fidelity",
    6: "optimisation efficacy",
    7: "noise moments",
    8: "restoration improvement",
    9: "determinism",
    10: "spectral lifting round trip",
    11: "dataset regeneration",
}

_outcomes: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    for n, name in CRITERIA.items():
        config.addinivalue_line("markers", f"criterion_{n}: acceptance criterion {n} ({name})")


def pytest_runtest_logreport(report):
    marks = [m for m in report.keywords if m.startswith("criterion_")]
    if not marks:
        return
    n = int(marks[0].split("_")[1])
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = "PASS" if report.outcome == "passed" else "FAIL"
        if report.when == "setup" and report.outcome == "skipped":
            status = "SKIP"
        _outcomes[n] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        status, detail = _outcomes.get(n, ("NOT RUN", ""))
        line = f"criterion {n:2d} {status:7s} {name}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk():
    return desk_config()


@pytest.fixture(scope="session")
def tiny():
    return gradcheck_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
