import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        if n not in results:
            terminalreporter.write_line(f"SKIP criterion {n:2d}: not run")
            continue
        ok, detail = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}")
