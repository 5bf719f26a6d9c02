from __future__ import annotations

import pytest

from helpers import SPORTS_DOC, build_setup, toyverse_setup


@pytest.fixture(scope="session")
def toy():
    """The bundled synthetic suite under the evaluation embedder (dim 64, seed 0)."""
    return toyverse_setup()


@pytest.fixture(scope="session")
def sports():
    return build_setup([SPORTS_DOC], [], dim=256)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
