import threading
import time

import pytest

from spindle.netsim import gen_corpus

# criterion number -> list of (outcome, title, detail)
_CRITERIA: dict[int, list[tuple[str, str, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        n, title = marker.args
        detail = dict(item.user_properties).get("detail", "")
        if hasattr(rep, "wasxfail"):
            status = "XFAIL"
            detail = f"{detail} | {rep.wasxfail}".strip(" |")
        elif rep.skipped:
            status = "SKIP"
            reason = rep.longrepr[2] if isinstance(rep.longrepr, tuple) else str(rep.longrepr)
            detail = f"{detail} | {reason}".strip(" |")
        else:
            status = "PASS" if rep.passed else "FAIL"
        _CRITERIA.setdefault(n, []).append((status, title, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        for status, title, detail in _CRITERIA[n]:
            tr.write_line(f"criterion {n:>2} {status:<5} {title}: {detail}")


@pytest.fixture
def detail(record_property):
    """Attach a one-line measurement summary to an acceptance test."""

    def put(text: str) -> None:
        record_property("detail", text)
        print(text)

    return put


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    return gen_corpus(tmp_path_factory.mktemp("small_corpus"), 48, 40, 30, seed=3)


@pytest.fixture(scope="session")
def big_corpus(tmp_path_factory):
    return gen_corpus(tmp_path_factory.mktemp("big_corpus"), 1000, 256, 256, seed=11)


class ThreadWatch:
    """Records the threads alive at creation and reports new ones later."""

    IGNORED = ("netsim-timer",)

    def __init__(self) -> None:
        self.before = set(threading.enumerate())

    def new_threads(self, settle: float = 0.0) -> list[threading.Thread]:
        end = time.monotonic() + settle
        while True:
            extra = [
                t
                for t in threading.enumerate()
                if t not in self.before and t.is_alive() and t.name not in self.IGNORED
            ]
            if not extra or time.monotonic() >= end:
                return extra
            time.sleep(0.01)


@pytest.fixture
def thread_watch():
    return ThreadWatch()
