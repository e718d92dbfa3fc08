import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter):
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _CRITERION.search(getattr(rep, "nodeid", ""))
            if m and (rep.when == "call" or outcome != "passed"):
                key = int(m.group(1))
                # a setup error or call failure wins over a pass
                if rows.get(key, ("PASS",))[0] != "FAIL":
                    rows[key] = ("PASS" if outcome == "passed" else "FAIL", m.group(2))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(rows):
        status, name = rows[key]
        terminalreporter.write_line(f"criterion {key}: {status}  {name.replace('_', ' ')}")
