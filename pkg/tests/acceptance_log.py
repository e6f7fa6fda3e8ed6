"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

import functools
import time

RESULTS = []


def criterion(label):
    """Decorate a test returning a short detail string; records PASS, or FAIL with the error."""
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
                RESULTS.append(f"FAIL  {label}  [{time.perf_counter() - t0:.0f}s] {msg}")
                print(RESULTS[-1])
                raise
            RESULTS.append(f"PASS  {label}  [{time.perf_counter() - t0:.0f}s] {detail or ''}")
            print(RESULTS[-1])
        return wrapper
    return deco
