import numpy as np
import pytest

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")
    config.stash[_VERDICTS] = []


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None and (report.when == "call" or (report.when == "setup" and report.failed)):
        number, title = marker.args
        detail = dict(item.user_properties).get("detail", "")
        status = "PASS" if report.passed else "FAIL"
        item.config.stash[_VERDICTS].append((number, f"criterion {number} {status}: {title}" + (f" | {detail}" if detail else "")))
    return report


def pytest_terminal_summary(terminalreporter, config):
    verdicts = sorted(config.stash.get(_VERDICTS, []))
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for _, line in verdicts:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def detail(record_property):
    """Attach a one-line measurement summary to the criterion verdict."""

    def put(text: str) -> None:
        record_property("detail", text)

    return put
