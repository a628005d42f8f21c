import numpy as np
import pytest

from fedcd import data as D


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synthetic():
    spec = D.SyntheticSpec(
        schools=3, students_per_school=12, exercises=30, concepts=4,
        school_ability_offsets=(-1.0, 0.0, 1.0), logs_per_student=15,
    )
    return D.generate_synthetic(spec, 7)


@pytest.fixture(scope="session")
def small_clients(small_synthetic):
    catalog, qmatrix, logs = small_synthetic
    return D.split_clients(logs, catalog, 0.8, 3), qmatrix


def pytest_terminal_summary(terminalreporter):
    lines = []
    for status in ("passed", "failed"):
        for rep in terminalreporter.stats.get(status, []):
            props = dict(getattr(rep, "user_properties", ()))
            if "criterion" in props and rep.when == "call":
                lines.append((props["criterion"], "PASS" if rep.passed else "FAIL", props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for crit, verdict, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {crit}: {verdict}  {detail}")
