"""Collects one verdict line per acceptance criterion for the terminal summary."""

LINES = []


def verdict(number, title, ok, detail=""):
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
    LINES.append(line)
    print(line)
    return ok
