from __future__ import annotations

import pytest


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def acceptance_line(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return request.config.acceptance_lines.append


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
