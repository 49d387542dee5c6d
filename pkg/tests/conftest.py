import numpy as np
import pytest

from trap_attack.embedding import ToyEmbedder
from trap_attack.stack import build_stack


@pytest.fixture(scope="session")
def embedder():
    return ToyEmbedder()


@pytest.fixture(scope="session")
def stack():
    return build_stack("toy")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h=32, w=32):
    return rng.uniform(0.0, 1.0, size=(h, w, 3))


# acceptance criteria report one line each in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.acceptance_passed = rep.passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
