"""Collects acceptance results and prints one line per criterion at the end of the run."""

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
    ACCEPTANCE[number] = (title, bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {title} ({detail})")
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")
