"""Collects one pass/fail line per acceptance criterion for the terminal summary."""
LINES: dict[str, str] = {}


def record(criterion: str, ok: bool, detail: str) -> bool:
    line = f"criterion {criterion:<4} {'PASS' if ok else 'FAIL'}  {detail}"
    LINES[criterion] = line
    print(line)
    return ok
