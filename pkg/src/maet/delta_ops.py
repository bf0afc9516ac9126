"""Elementwise arithmetic and inner products over aligned stores.

Within a tensor every reduction runs sequentially in flat-index order with
float64 accumulation, so results are bit-reproducible whatever the thread
count; parallelism only ever spans whole tensors.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import AlignmentError, DegenerateError, UsageError
from .tensor_store import DType, LazyStore, Store, TensorMeta


def check_aligned(*stores: Store, floating: bool = False) -> list[str]:
    """Return the shared sorted name list, or raise naming the first offender."""
    first = stores[0]
    names = set(first.names())
    for other in stores[1:]:
        other_names = set(other.names())
        missing = sorted(names ^ other_names)
        if missing:
            raise AlignmentError(f"tensor {missing[0]!r} is not present in every store")
    for name in sorted(names):
        shape = first.meta(name).shape
        for other in stores[1:]:
            if other.meta(name).shape != shape:
                raise AlignmentError(
                    f"shape mismatch for tensor {name!r}: {list(shape)} vs {list(other.meta(name).shape)}"
                )
        if floating and any(not s.meta(name).dtype.is_float for s in stores):
            raise AlignmentError(f"tensor {name!r} is not floating point in every store")
    return sorted(names)


def seq_sum(values: np.ndarray) -> float:
    """Left-to-right float64 sum (``add.accumulate`` never reorders)."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        return 0.0
    return float(np.add.accumulate(flat)[-1])


def _f32_metas(store: Store, names: Sequence[str]) -> list[TensorMeta]:
    return [TensorMeta(n, DType.F32, store.meta(n).shape) for n in names]


def diff(minuend: Store, subtrahend: Store) -> LazyStore:
    """Per-element ``minuend - subtrahend`` in float32 work precision."""
    names = check_aligned(minuend, subtrahend, floating=True)

    def compute(name: str) -> np.ndarray:
        return minuend.read(name) - subtrahend.read(name)

    return LazyStore(_f32_metas(minuend, names), compute, {
        "kind": "delta",
        "minuend": minuend.identity,
        "subtrahend": subtrahend.identity,
    })


def combine_tensor(terms: Sequence[tuple[Store, float]], name: str) -> np.ndarray:
    """Float64 ``sum(c_k * x_k)`` for one tensor, before any narrowing.

    Terms are accumulated in the order given.  Terms whose coefficient is
    exactly zero are skipped, so they cannot perturb signed zeros.
    """
    acc = None
    for store, coef in terms:
        coef = float(coef)
        if coef == 0.0:
            continue
        term = store.read(name).astype(np.float64)
        term *= coef
        if acc is None:
            acc = term
        else:
            acc += term
            del term
    if acc is None:
        acc = np.zeros(terms[0][0].meta(name).shape, dtype=np.float64)
    return acc


def linear_combine(terms: Sequence[tuple[Store, float]], metadata: dict[str, str] | None = None) -> LazyStore:
    """Weighted sum of aligned delta stores, narrowed to float32 on read."""
    terms = [(store, float(coef)) for store, coef in terms]
    if not terms:
        raise UsageError("linear_combine needs at least one term")
    for _, coef in terms:
        if not math.isfinite(coef):
            raise UsageError(f"non-finite coefficient {coef!r}")
    names = check_aligned(*(s for s, _ in terms), floating=True)
    meta = {"kind": "delta", "coefficients": ",".join(repr(c) for _, c in terms)}
    meta.update(metadata or {})
    return LazyStore(_f32_metas(terms[0][0], names), lambda name: combine_tensor(terms, name), meta)


def _pair(a: Store, b: Store, name: str) -> tuple[np.ndarray, np.ndarray]:
    if name not in a or name not in b:
        raise AlignmentError(f"unknown tensor {name!r}")
    if a.meta(name).shape != b.meta(name).shape:
        raise AlignmentError(f"shape mismatch for tensor {name!r}")
    x = a.read(name).astype(np.float64).ravel()
    y = b.read(name).astype(np.float64).ravel()
    return x, y


def tensor_dot(a: Store, b: Store, name: str) -> float:
    x, y = _pair(a, b, name)
    # float32 * float32 products are exact in float64
    return seq_sum(x * y)


def _cosine(dot: float, nx: float, ny: float, name: str) -> float:
    if nx == 0.0 or ny == 0.0:
        raise DegenerateError(f"cosine undefined for tensor {name!r}: zero-norm operand")
    return min(1.0, max(-1.0, dot / (math.sqrt(nx) * math.sqrt(ny))))


def tensor_cosine(a: Store, b: Store, name: str) -> float:
    x, y = _pair(a, b, name)
    return _cosine(seq_sum(x * y), seq_sum(x * x), seq_sum(y * y), name)


def tensor_l1(a: Store, b: Store, name: str) -> float:
    x, y = _pair(a, b, name)
    return seq_sum(np.abs(x - y))


def tensor_norms(a: Store, b: Store, name: str) -> tuple[float, float, float, float]:
    """``(dot, |a|^2, |b|^2, l1)`` from a single read of each operand."""
    x, y = _pair(a, b, name)
    return seq_sum(x * y), seq_sum(x * x), seq_sum(y * y), seq_sum(np.abs(x - y))
