import time
from contextlib import contextmanager

import pytest

_RESULTS = pytest.StashKey[dict]()


class CriterionLog:
    """Times one acceptance check and records a PASS/FAIL/SKIP line for the session summary."""

    def __init__(self, results: dict):
        self._results = results

    @contextmanager
    def check(self, number: int, title: str, limit_s: float):
        info = {"detail": ""}
        t0 = time.perf_counter()
        status = "FAIL"
        try:
            yield info
            elapsed = time.perf_counter() - t0
            if elapsed > limit_s:
                info["detail"] += f" runtime {elapsed:.1f}s over {limit_s:g}s limit"
                raise AssertionError(f"criterion {number} took {elapsed:.1f}s (limit {limit_s:g}s)")
            status = "PASS"
        except pytest.skip.Exception as e:
            status = "SKIP"
            info["detail"] = str(e)
            raise
        finally:
            elapsed = time.perf_counter() - t0
            line = f"criterion {number:>2} {status}: {title} [{elapsed:.1f}s] {info['detail']}".rstrip()
            self._results[number] = line
            print(line)


@pytest.fixture
def criterion(request) -> CriterionLog:
    return CriterionLog(request.config.stash.setdefault(_RESULTS, {}))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
