"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
from __future__ import annotations

import time
from contextlib import contextmanager

LINES: list[str] = []


@contextmanager
def criterion(number: int, title: str):
    """Record PASS when the block finishes, FAIL with the reason when it raises.

    The block may fill the yielded dict with details worth printing.
    """
    info: dict = {}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        LINES.append(f"[{number:2d}] FAIL  {title}: {reason} ({time.perf_counter() - t0:.1f}s)")
        raise
    detail = ", ".join(f"{k}={v}" for k, v in info.items())
    LINES.append(f"[{number:2d}] PASS  {title}" + (f": {detail}" if detail else "")
                 + f" ({time.perf_counter() - t0:.1f}s)")
