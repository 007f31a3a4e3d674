from helpers import ACCEPTANCE, ACCEPTANCE_TITLES


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance" in getattr(r, "nodeid", "")
              for key, reports in terminalreporter.stats.items() if key != "deselected"
              for r in reports)
    if not (ACCEPTANCE or ran):
        return
    terminalreporter.section("acceptance criteria")
    for n, title in ACCEPTANCE_TITLES.items():
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")
        elif any(f"test_criterion_{n:02d}" in getattr(r, "nodeid", "")
                 for r in terminalreporter.stats.get("deselected", [])):
            terminalreporter.write_line(f"[NOT RUN] {n:2d}. {title}: deselected")
        else:
            terminalreporter.write_line(f"[FAIL] {n:2d}. {title}: not evaluated (test errored)")
