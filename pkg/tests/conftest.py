from __future__ import annotations

from pathlib import Path

import pytest

from fedlad import synth
from fedlad.logs import prepare_dataset

FIXTURES = Path(__file__).parent / "fixtures"

_acceptance_lines: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): exit criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = marker.args
    status = "PASS" if report.passed else "FAIL"
    _acceptance_lines.append(f"criterion {number:>2}: {status}  {title}  [{item.name}]")


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_acceptance_lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def separable_corpus(tmp_path_factory):
    return synth.write_corpus("separable", 10000, 7, tmp_path_factory.mktemp("separable"))


@pytest.fixture(scope="session")
def separable_dataset(separable_corpus):
    log_path, label_path = separable_corpus
    dataset, _ = prepare_dataset(log_path, "session", label_path, 10, 10)
    return dataset


@pytest.fixture(scope="session")
def drift_corpus(tmp_path_factory):
    return synth.write_corpus("drift", 10000, 7, tmp_path_factory.mktemp("drift"))


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    return synth.write_corpus("separable", 600, 3, tmp_path_factory.mktemp("small"))
