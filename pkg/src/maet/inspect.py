"""Per-layer similarity between delta stores and per-tensor summaries."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from ._parallel import ordered_map
from .delta_ops import check_aligned, seq_sum
from .tensor_store import Store

OTHER = "other"
_FIRST_INT = re.compile(r"\d+")


def layer_key(name: str) -> str:
    """First integer embedded in a tensor name (``layers.12.mlp`` -> ``"12"``)."""
    m = _FIRST_INT.search(name)
    return str(int(m.group())) if m else OTHER


def _key_order(key: str):
    return (1, 0) if key == OTHER else (0, int(key))


@dataclass
class LayerRow:
    layer: str
    cosine: float | None  # None when either side has zero norm
    l1: float
    tensors: int


def compare_layers(a: Store, b: Store, threads: int | None = None) -> list[LayerRow]:
    """Cosine over each layer's concatenated tensors and summed L1 distance."""
    names = check_aligned(a, b, floating=True)
    groups: dict[str, list[str]] = {}
    for name in names:
        groups.setdefault(layer_key(name), []).append(name)

    def row(key: str) -> LayerRow:
        dot = na = nb = l1 = 0.0
        # extends one sequential accumulation across the group's tensors
        for name in groups[key]:
            x = a.read(name).astype(np.float64).ravel()
            y = b.read(name).astype(np.float64).ravel()
            dot = seq_sum(np.concatenate(([dot], x * y)))
            na = seq_sum(np.concatenate(([na], x * x)))
            nb = seq_sum(np.concatenate(([nb], y * y)))
            l1 = seq_sum(np.concatenate(([l1], np.abs(x - y))))
        cos = None
        if na > 0 and nb > 0:
            cos = min(1.0, max(-1.0, dot / (math.sqrt(na) * math.sqrt(nb))))
        return LayerRow(key, cos, l1, len(groups[key]))

    return list(ordered_map(row, sorted(groups, key=_key_order), threads))


@dataclass
class TensorStats:
    name: str
    min: float
    max: float
    mean: float
    l2: float
    zero_fraction: float
    finite: bool = True


def summarize(store: Store) -> list[TensorStats]:
    rows = []
    for name in store.names():
        x = store.read(name, check_finite=False).astype(np.float64).ravel()
        finite = bool(np.isfinite(x).all())
        if x.size == 0:
            rows.append(TensorStats(name, 0.0, 0.0, 0.0, 0.0, 0.0, True))
            continue
        if not finite:
            rows.append(TensorStats(name, math.nan, math.nan, math.nan, math.nan,
                                    float(np.count_nonzero(x == 0)) / x.size, False))
            continue
        rows.append(TensorStats(
            name, float(x.min()), float(x.max()), seq_sum(x) / x.size,
            math.sqrt(seq_sum(x * x)), float(np.count_nonzero(x == 0)) / x.size,
        ))
    return rows

