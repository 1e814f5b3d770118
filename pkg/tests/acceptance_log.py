"""Collects the one-line verdicts of the acceptance checks for the end-of-run summary."""

RESULTS = []


def record(number: int, title: str, ok: bool, detail: str) -> str:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}  {title}: {detail}"
    RESULTS.append((number, line))
    return line
