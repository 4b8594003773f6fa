from __future__ import annotations

import socket

import pytest


class NetworkForbidden(RuntimeError):
    pass


def _forbid(*args, **kwargs):
    raise NetworkForbidden("network access attempted in an offline test")


@pytest.fixture
def no_network(monkeypatch):
    """Fail loudly on any attempt to open a network connection."""
    monkeypatch.setattr(socket.socket, "connect", _forbid)
    monkeypatch.setattr(socket.socket, "connect_ex", _forbid)
    monkeypatch.setattr(socket, "create_connection", _forbid)
    monkeypatch.setattr(socket, "getaddrinfo", _forbid)
    yield


@pytest.fixture
def criterion(request):
    """Record a PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, name: str, ok: bool, detail: str = "") -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}" + (f" ({detail})" if detail else "")
        print(line)
        lines = getattr(request.config, "_acceptance_lines", [])
        lines.append((number, line))
        request.config._acceptance_lines = lines
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda item: item[0]):
            terminalreporter.write_line(line)
