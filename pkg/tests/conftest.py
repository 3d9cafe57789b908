from __future__ import annotations

import contextlib

import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Use as ``with verdict(n, title) as v:``; set ``v.detail`` to report
    magnitudes. A failure inside the block is recorded and re-raised.
    """
    lines = request.config.stash.setdefault(_LINES, [])

    class Verdict:
        detail = ""

    @contextlib.contextmanager
    def record(number: int, title: str):
        v = Verdict()
        try:
            yield v
        except BaseException as exc:
            msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            lines.append(f"FAIL criterion {number:>2} ({title}): {msg}")
            raise
        lines.append(f"PASS criterion {number:>2} ({title}){': ' + v.detail if v.detail else ''}")
        print(lines[-1])

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
