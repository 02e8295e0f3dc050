import pytest

from scalestack import tensor as T


@pytest.fixture
def f64():
    """Run a test in 64-bit mode and restore the previous precision afterwards."""
    previous = 64 if T.get_dtype().itemsize == 8 else 32
    T.set_precision(64)
    yield
    T.set_precision(previous)


@pytest.fixture
def rng():
    import numpy as np
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(results):
        ok, detail = results[criterion]
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
