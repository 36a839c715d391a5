import pytest

from hardtrace.corpus import generate_corpus
from hardtrace.samples import toy


@pytest.fixture
def toy_case():
    return toy()


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(30, seed=11)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
