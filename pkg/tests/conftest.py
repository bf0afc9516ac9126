from __future__ import annotations

import numpy as np
import pytest

from maet.tensor_store import MemoryStore


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_store(arrays, dtypes=None, metadata=None) -> MemoryStore:
    return MemoryStore({k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()}, dtypes, metadata)


def random_store(rng, shapes, scale=1.0, metadata=None) -> MemoryStore:
    return MemoryStore({n: (rng.standard_normal(s) * scale).astype(np.float32) for n, s in shapes.items()},
                       metadata=metadata)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, ok, detail)``."""
    results = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number: int, ok: bool, detail: str) -> None:
        results[number] = (ok, detail)
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
