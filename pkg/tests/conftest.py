import pytest

# Filled in by test_acceptance.py: {criterion number: (passed, detail)}.
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}

CRITERIA = {
    1: "gradient suite",
    2: "causality suite",
    3: "return-to-go oracle",
    4: "shuffle invariants",
    5: "checkpoint round-trip and extraction",
    6: "desk trajectory training",
    7: "desk language-model training",
    8: "dataset ordering and history scores",
    9: "end-to-end pipelines",
    10: "rerun determinism",
    11: "report arithmetic",
}


@pytest.fixture
def record():
    """Record a criterion verdict for the end-of-run summary, then assert it."""

    def _record(n: int, ok, detail: str):
        ACCEPTANCE_RESULTS[n] = (bool(ok), str(detail))
        assert ok, f"criterion {n} ({CRITERIA[n]}): {detail}"

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        if n in ACCEPTANCE_RESULTS:
            ok, detail = ACCEPTANCE_RESULTS[n]
            verdict = "PASS" if ok else "FAIL"
            terminalreporter.write_line(f"criterion {n:2d} ({CRITERIA[n]}): {verdict}  [{detail}]")
        else:
            terminalreporter.write_line(
                f"criterion {n:2d} ({CRITERIA[n]}): NO VERDICT (test did not reach its measurement)"
            )
