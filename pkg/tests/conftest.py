import time
from contextlib import contextmanager

import pytest

_results = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance line: ``with criterion(n, name, limit) as c: c.check(ok, detail)``."""
    store = request.config.stash.setdefault(_results, {})

    @contextmanager
    def run(number: int, name: str, limit_s: float):
        state = {"ok": False, "detail": ""}

        class Check:
            def check(self, ok: bool, detail: str) -> None:
                state["ok"], state["detail"] = bool(ok), detail

        t0 = time.perf_counter()
        try:
            yield Check()
        except Exception as exc:
            state["ok"], state["detail"] = False, f"{type(exc).__name__}: {exc}"
            raise
        finally:
            elapsed = time.perf_counter() - t0
            in_time = elapsed < limit_s
            verdict = "PASS" if state["ok"] and in_time else "FAIL"
            budget = "" if in_time else f", over the {limit_s:.0f}s limit"
            line = f"criterion {number:2d} {verdict}  {name}: {state['detail']} ({elapsed:.1f}s{budget})"
            store[number] = line
            print(line)
        assert state["ok"], state["detail"]
        assert in_time, f"{name} took {elapsed:.1f}s, limit {limit_s}s"

    return run


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_results, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for n in sorted(store):
            terminalreporter.write_line(store[n])
