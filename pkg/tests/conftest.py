import os

import numpy as np
import pytest
from hypothesis import settings

from flowforge.manifest import ImageDims, SampleRecord

settings.register_profile("default", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


def pytest_runtest_logreport(report):
    crit = getattr(report, "_criterion", None)
    if crit is None:
        return
    n, title = crit
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "ran": False})
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry["ran"] = True
        if report.outcome != "passed":
            entry["ok"] = False


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result()._criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entry = _CRITERIA[n]
        status = "PASS" if entry["ok"] and entry["ran"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status}  {entry['title']}")


# --- shared helpers ------------------------------------------------------------


def edit_record(sid, refs, target=None, instruction=""):
    refs = tuple(ImageDims(h, w) for h, w in refs)
    target = ImageDims(*(target or (refs[0].height, refs[0].width)))
    return SampleRecord(sid, "edit", refs, target, instruction)


def t2i_record(sid, target):
    return SampleRecord(sid, "t2i", (), ImageDims(*target), "")


def central_difference(f, x, h=1e-6):
    """Gradient of scalar f at array x by central differences."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        grad[i] = (f(x + e) - f(x - e)) / (2 * h)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))
