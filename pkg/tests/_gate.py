"""Collects one pass/fail line per acceptance criterion."""

RESULTS: list[tuple[int, str, bool, str]] = []


def record(number: int, name: str, passed: bool, detail: str) -> bool:
    RESULTS.append((number, name, bool(passed), detail))
    print(f"\n{line(RESULTS[-1])}")
    return bool(passed)


def line(entry) -> str:
    number, name, passed, detail = entry
    return f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {name}: {detail}"
