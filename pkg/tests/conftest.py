from __future__ import annotations

from pathlib import Path

import pytest

from psyforge.gateway import Gateway, mock_handle
from psyforge.patterns import Registry, taxonomy_registry
from psyforge.synthetic import SyntheticBackend

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def registry() -> Registry:
    return taxonomy_registry()


@pytest.fixture
def synthetic_gateway() -> Gateway:
    return Gateway(mock_handle(), SyntheticBackend(), sleep=lambda s: None)


@pytest.fixture
def fixture_text():
    def read(name: str) -> str:
        return (FIXTURES / name).read_text(encoding="utf-8")

    return read


# ---------------------------------------------------------------- acceptance summary

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = marker.args
    details = "; ".join(v for k, v in item.user_properties if k == "detail")
    verdict = "PASS" if report.passed else "FAIL"
    item.config.stash[_CRITERIA][number] = f"criterion {number} ({title}): {verdict}" + (f" [{details}]" if details else "")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
