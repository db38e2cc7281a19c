from __future__ import annotations

import numpy as np
import pytest


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise error relative to max(1, |a|, |n|)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def numerical_grad(f, arrays: list[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    """Central finite differences of a scalar function, f64 accumulation."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat, gf = arr.ravel(), g.ravel()
        for i in range(arr.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def numerical_grad_at(f, arr: np.ndarray, coords, h: float = 1e-3) -> np.ndarray:
    """Central differences at selected flat coordinates only."""
    out = np.zeros(len(coords))
    flat = arr.ravel()
    for n, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[n] = (fp - fm) / (2.0 * h)
    return out


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


# -- acceptance criteria reporting ------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(num: int, name: str, passed: bool, detail: str = ""):
    """Queue one pass/fail line; printed in the terminal summary."""
    status = "PASS" if passed else "FAIL"
    suffix = f" ({detail})" if detail else ""
    line = f"criterion {num:2d} [{name}]: {status}{suffix}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
