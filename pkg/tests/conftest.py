"""Shared fixtures and the acceptance-line reporter.

The heavyweight artifacts (a fully trained default teacher and its
trajectory set) are session-scoped so the acceptance tests share one copy.
Tests record one ``[criterion N] PASS/FAIL`` line each; the collected lines
are echoed in a dedicated section of the terminal summary so the acceptance
verdict survives output capturing.
"""

from __future__ import annotations

import pytest

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_teacher():
    """Teacher trained at the default configuration (the slow fixture)."""
    from linflow.transfer_trainer import train_teacher

    model, _rows = train_teacher(seed=0)
    return model


@pytest.fixture(scope="session")
def default_trajectories(default_teacher):
    from linflow.flow_core import FlowSchedule
    from linflow.trajectory_store import collect

    return collect(default_teacher, FlowSchedule.uniform(8),
                   n_trajectories=2048, seed=0)
