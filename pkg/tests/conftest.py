import numpy as np
import pytest

from earlyexit.model import attach_exits, build_backbone, build_reference_model


@pytest.fixture
def tiny_model():
    """Small 5-block multi-exit net on 1x12x12 inputs; fast enough for exhaustive checks."""
    rng = np.random.default_rng(11)
    blocks, final = build_backbone((1, 12, 12), 4, widths=(4, 4, 6, 6, 8), pool_after=(2, 4), rng=rng)
    return attach_exits(blocks, final, (1, 12, 12), 4, M=3, rng=rng)


@pytest.fixture(scope="session")
def reference_model():
    return build_reference_model((1, 28, 28), 10, M=6, seed=0)


# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary
ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): test belongs to acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    n = marker.args[0]
    ok, details = ACCEPTANCE.get(n, (True, []))
    details = details + [f"{k}={v}" for k, v in item.user_properties]
    ACCEPTANCE[n] = (ok and rep.passed, details)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, details = ACCEPTANCE[n]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}"
        if details:
            line += "  (" + "; ".join(details) + ")"
        terminalreporter.write_line(line)
