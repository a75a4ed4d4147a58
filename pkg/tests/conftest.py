import pytest

from mmgsim.scenario import DEFAULT_SCENARIO, default_config, run


@pytest.fixture(scope="session")
def default_text():
    return DEFAULT_SCENARIO.read_text()


@pytest.fixture(scope="session")
def default_run():
    """One full default-scenario run shared by every test in the session."""
    return run(default_config())


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
