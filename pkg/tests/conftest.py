import dataclasses

import pytest
from hypothesis import settings

from ldpstream.experiments import binary_query
from ldpstream.query import Query, speed_buckets

settings.register_profile("repo", derandomize=True, deadline=None, max_examples=60)
settings.load_profile("repo")

FAR_FUTURE = 4_102_444_800_000  # 2100-01-01


@pytest.fixture
def speed_query():
    return Query(
        query_id="speed-1",
        analyst_id="analyst-1",
        sensor="speed",
        buckets=speed_buckets(),
        p=0.5,
        q=0.5,
        epoch_seconds=10,
        t_start=1_000_000,
        t_end=FAR_FUTURE,
        signature=b"sig",
    )


@pytest.fixture
def yes_no_query():
    return dataclasses.replace(binary_query("yes-no", 0.5, 0.5, epoch_seconds=10), t_end=FAR_FUTURE)


_acceptance_lines: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion, then assert."""

    def record(number: int, name: str, ok: bool, detail: str) -> None:
        _acceptance_lines.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} -- {detail}")
        print(_acceptance_lines[-1])
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
