from __future__ import annotations

import numpy as np
import pytest

from attrda.schema import AttributeSchema, factorial_schema

H = 1e-5
REL_TOL = 1e-4


def numeric_grad(fn, arrays: dict[str, np.ndarray], names=None, h: float = H) -> dict[str, np.ndarray]:
    """Central differences of scalar ``fn(arrays)`` w.r.t. each named array.

    Arrays are perturbed in place and restored.
    """
    out = {}
    for name in names or list(arrays):
        arr = arrays[name]
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(arrays)
            flat[i] = orig - h
            fm = fn(arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out[name] = g
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-10:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def max_rel_error(analytic: dict, numeric: dict) -> float:
    return max(rel_error(analytic[k], numeric[k]) for k in numeric)


@pytest.fixture
def small_schema() -> AttributeSchema:
    # 6 classes, make(2) x body(3)
    return factorial_schema({"make": 2, "body": 3})


@pytest.fixture
def uneven_schema() -> AttributeSchema:
    return AttributeSchema.from_maps(5, {"a": [0, 0, 0, 1, 1], "b": [0, 1, 2, 2, 2]})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)
