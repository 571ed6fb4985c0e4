from __future__ import annotations

import pytest

from toolverify.retrieval import LexicalRetriever, build_index
from toolverify.synthetic import SyntheticTask, write_bundle


@pytest.fixture(scope="session")
def task() -> SyntheticTask:
    return SyntheticTask()


@pytest.fixture(scope="session")
def bundle(tmp_path_factory, task):
    return write_bundle(tmp_path_factory.mktemp("bundle"), task, pool_size=600, heldout_size=200, benchmark_size=200)


@pytest.fixture(scope="session")
def retriever(task) -> LexicalRetriever:
    return LexicalRetriever(build_index(task.corpus()))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
