"""Per-criterion outcome lines collected by the acceptance suite."""

from __future__ import annotations

import time
from contextlib import contextmanager

RESULTS: dict[int, str] = {}


@contextmanager
def criterion(number: int, title: str, budget: float | None = None):
    """Record PASS/FAIL for one criterion; ``details`` is filled in by the test body.

    The wall time is checked against ``budget`` seconds when given.
    """
    details: dict = {}
    start = time.perf_counter()
    ok = False
    try:
        yield details
        elapsed = time.perf_counter() - start
        details["time"] = f"{elapsed:.1f}s"
        if budget is not None:
            details["budget"] = f"{budget:g}s"
            assert elapsed < budget, f"took {elapsed:.1f}s, budget {budget:g}s"
        ok = True
    except BaseException as exc:
        details["error"] = str(exc).splitlines()[0][:120] if str(exc) else type(exc).__name__
        raise
    finally:
        text = ", ".join(f"{k}={v}" for k, v in details.items())
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}  [{text}]"
        RESULTS[number] = line
        print(line)
