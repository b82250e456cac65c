"""Per-criterion outcomes of the acceptance suite, printed at session end."""

from __future__ import annotations

from contextlib import contextmanager

RESULTS: dict[int, tuple[bool, str]] = {}


@contextmanager
def criterion(number: int, title: str):
    """Record PASS/FAIL for ``number``; the body may fill ``info['detail']``."""
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        RESULTS[number] = (False, f"{title}: {msg}")
        raise
    RESULTS[number] = (True, f"{title}: {info['detail']}".rstrip(": "))


def summary_lines() -> list[str]:
    return [f"criterion {n:2d}  {'PASS' if ok else 'FAIL'}  {text}"
            for n, (ok, text) in sorted(RESULTS.items())]
