import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """3 subjects x (1 bonafide + 2 attack) videos x 4 frames at 64 px."""
    from pixbis.data import GeneratorConfig, generate_dataset

    out = tmp_path_factory.mktemp("tiny")
    return generate_dataset(GeneratorConfig(subjects=3, frames=4, name="tiny"), out)


_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line: call with (number, summary); pass/fail comes from the test outcome."""
    book = request.config.stash.setdefault(_VERDICTS, {})

    def record(number, summary):
        book[number] = [summary, "FAIL"]
        request.node.user_properties.append(("criterion", number))

    yield record
    # the outcome is filled in by the report hook below


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call":
        return
    book = item.config.stash.get(_VERDICTS, {})
    for key, number in item.user_properties:
        if key == "criterion" and number in book:
            book[number][1] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter, config):
    book = config.stash.get(_VERDICTS, {})
    if not book:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(book):
        summary, status = book[number]
        terminalreporter.write_line(f"[{status}] criterion {number}: {summary}")
