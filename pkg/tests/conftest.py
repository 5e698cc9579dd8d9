import numpy as np
import pytest

ACCEPTANCE_LINES: list[str] = []


def numeric_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar numpy function, independent of the autograd code."""
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + step
        up = f(x)
        x[idx] = orig - step
        down = f(x)
        x[idx] = orig
        g[idx] = (up - down) / (2 * step)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def record():
    def _record(name: str, passed: bool, detail: str = "") -> None:
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {name}" + (f"  ({detail})" if detail else ""))
        print(ACCEPTANCE_LINES[-1])

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
