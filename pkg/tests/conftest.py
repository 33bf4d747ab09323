import numpy as np
import pytest


def pytest_addoption(parser):
    parser.addoption("--nightly", action="store_true", default=False,
                     help="run the long fracture simulations")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--nightly"):
        return
    skip = pytest.mark.skip(reason="nightly only, pass --nightly")
    for item in items:
        if "nightly" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config._criteria = []


@pytest.fixture
def verdict(request):
    """Record and print one pass/fail line for an acceptance criterion."""
    def record(number, title, ok, detail):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        request.config._criteria.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    if config._criteria:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config._criteria):
            terminalreporter.write_line(line)
