"""Shared test setup: pin math libraries to one thread before numpy loads
so timings and float reductions are stable run to run."""

import os

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from bimamba import tensor  # noqa: E402


@pytest.fixture(autouse=True)
def _reset_dtype():
    """Every test starts and ends in float32 mode."""
    tensor.set_default_dtype("float32")
    yield
    tensor.set_default_dtype("float32")


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


# === acceptance reporting ===

_ACCEPTANCE_LINES: list[str] = []


class CriterionRecorder:
    """Collects one pass/fail line per acceptance criterion for the summary."""

    def check(self, num: int, name: str, ok: bool, measured: str, required: str) -> None:
        line = (
            f"criterion {num:2d} [{'PASS' if ok else 'FAIL'}] {name}: "
            f"measured {measured}; required {required}"
        )
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line


@pytest.fixture(scope="session")
def criteria():
    return CriterionRecorder()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
