import pytest

# criterion number -> (passed, detail, seconds); filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        passed, detail, seconds = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}  [{seconds:.1f} s]")


@pytest.fixture
def record_criterion():
    def record(key, passed, detail, seconds):
        ACCEPTANCE[key] = (bool(passed), detail, seconds)
        print(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}  [{seconds:.1f} s]")

    return record
