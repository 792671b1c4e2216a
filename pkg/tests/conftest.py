import acceptance_registry


def pytest_terminal_summary(terminalreporter):
    if not acceptance_registry.RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for num, desc, ok in sorted(acceptance_registry.RESULTS):
        word = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{word}] criterion {num}: {desc}")
