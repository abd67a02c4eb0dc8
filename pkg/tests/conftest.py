import os
from collections import OrderedDict
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent


def babi_dir():
    """Root of the official bAbI v1.2 tree, or None when it is not available."""
    candidates = [os.environ.get("RELNET_BABI_DIR"), ROOT / "data" / "tasks_1-20_v1-2", ROOT / "data"]
    for c in candidates:
        if c and (Path(c) / "en-10k").is_dir():
            return Path(c)
    return None


@pytest.fixture
def official_babi():
    d = babi_dir()
    if d is None:
        pytest.fail("official bAbI v1.2 files not found: set RELNET_BABI_DIR to the "
                    "tasks_1-20_v1-2 directory (needs en-10k/)", pytrace=False)
    return d


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config._criteria = OrderedDict()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = marker.args
        entry = item.config._criteria.setdefault(number, {"title": title, "ok": True, "failed": []})
        if not rep.passed:
            entry["ok"] = False
            entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    crit = getattr(config, "_criteria", None)
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(crit):
        entry = crit[number]
        status = "PASS" if entry["ok"] else "FAIL"
        extra = "" if entry["ok"] else f"  ({', '.join(entry['failed'])})"
        terminalreporter.write_line(f"criterion {number}: {status}  {entry['title']}{extra}")
