import contextlib

import pytest

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


@contextlib.contextmanager
def _criterion(number: int, title: str):
    """Record the outcome of one acceptance criterion; failures still propagate."""
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        msg = f"{info['detail']} | {type(exc).__name__}: {exc}".strip(" |")
        _CRITERIA[number] = (title, False, " ".join(msg.split())[:400])
        raise
    _CRITERIA[number] = (title, True, info["detail"])


@pytest.fixture
def criterion():
    return _criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
