"""Key-neuron scoring and masks.

A neuron's importance is approximated by how far a short probe training run
moved it, ``|probe - base|`` (one score per scalar parameter) or the L2 norm
of a row's change (one score per leading-dimension row).  The top ``k``
percent of units across all eligible tensors form a :class:`NeuronMask`.
"""

from __future__ import annotations

import fnmatch
import json
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .delta_ops import check_aligned
from .errors import AlignmentError, FormatError, UsageError
from .tensor_store import DType, LazyStore, MemoryStore, Store, TensorMeta, open_store, save

GRANULARITIES = ("scalar", "row")
MASK_SUFFIX = ".idx"


def check_percent(k: float, what: str = "k") -> float:
    k = float(k)
    if not (0.0 < k <= 100.0) or math.isnan(k):
        raise UsageError(f"{what} must be in (0, 100], got {k!r}")
    return k


def percent_count(k_percent: float, n: int) -> int:
    """``ceil(k/100 * n)``, clamped to ``[1, n]`` for positive ``k``.

    A product within 1e-9 of an integer snaps to it, so e.g. two-thirds of
    three tensors is 2 despite binary rounding of ``200/3``.
    """
    x = float(k_percent) / 100.0 * n
    nearest = round(x)
    count = nearest if abs(x - nearest) <= 1e-9 * max(1.0, x) else math.ceil(x)
    return int(min(n, max(1, count)))


def check_pattern(pattern: str) -> str:
    if not isinstance(pattern, str) or not pattern:
        raise UsageError(f"malformed pattern {pattern!r}: empty")
    depth = 0
    for ch in pattern:
        if ch == "[":
            if depth:
                raise UsageError(f"malformed pattern {pattern!r}: nested '['")
            depth = 1
        elif ch == "]" and depth:
            depth = 0
    if depth:
        raise UsageError(f"malformed pattern {pattern!r}: unclosed '['")
    return pattern


def name_filter(include: Sequence[str] | None = None, exclude: Sequence[str] | None = None):
    """Predicate: matches any include pattern (default all) and no exclude pattern."""
    include = [check_pattern(p) for p in include or ()]
    exclude = [check_pattern(p) for p in exclude or ()]

    def keep(name: str) -> bool:
        if include and not any(fnmatch.fnmatchcase(name, p) for p in include):
            return False
        return not any(fnmatch.fnmatchcase(name, p) for p in exclude)

    return keep


def _units(shape: Sequence[int], granularity: str) -> int:
    if granularity == "scalar":
        return math.prod(shape)
    return int(shape[0]) if len(shape) else 1


@dataclass
class ImportanceMap:
    """Per-tensor non-negative scores plus the shapes they were scored from.

    ``scores`` is any store whose tensors are 1-D score vectors keyed by
    parameter name.  ``factor`` is a positive rescaling applied in float64 on
    read; it exists to exercise the fact that scaling never changes a mask.
    """

    scores: Store
    shapes: dict[str, tuple[int, ...]]
    granularity: str = "scalar"
    lambda_scale: float = 1.0
    factor: float = 1.0

    def names(self) -> list[str]:
        return sorted(self.shapes)

    def score(self, name: str) -> np.ndarray:
        s = self.scores.read(name).astype(np.float64).ravel()
        if self.factor != 1.0:
            s = s * self.factor
        return s

    def units(self, name: str) -> int:
        return _units(self.shapes[name], self.granularity)

    def rescaled(self, c: float) -> "ImportanceMap":
        if not c > 0:
            raise UsageError("rescaling factor must be positive")
        return ImportanceMap(self.scores, self.shapes, self.granularity,
                             self.lambda_scale * c, self.factor * c)

    @classmethod
    def from_arrays(cls, scores: Mapping[str, np.ndarray], shapes: Mapping[str, Sequence[int]] | None = None,
                    granularity: str = "scalar", lambda_scale: float = 1.0) -> "ImportanceMap":
        arrays = {k: np.asarray(v, dtype=np.float32).ravel() for k, v in scores.items()}
        shapes = {k: tuple(shapes[k]) if shapes else (arrays[k].size,) for k in arrays}
        for name, arr in arrays.items():
            if arr.size != _units(shapes[name], granularity):
                raise UsageError(f"score count mismatch for tensor {name!r}")
            if np.any(arr < 0):
                raise UsageError(f"negative importance score in tensor {name!r}")
        return cls(MemoryStore(arrays), shapes, granularity, lambda_scale)

    def save(self, path: str | os.PathLike) -> None:
        save(self.scores, path, dtypes={n: DType.F32 for n in self.scores.names()}, metadata={
            "kind": "importance",
            "granularity": self.granularity,
            "lambda_scale": repr(self.lambda_scale * self.factor),
            "shapes": json.dumps({k: list(v) for k, v in sorted(self.shapes.items())}),
        })

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ImportanceMap":
        store = open_store(path)
        md = store.metadata
        if md.get("kind") != "importance":
            raise FormatError(f"{path}: not an importance file")
        try:
            shapes = {k: tuple(v) for k, v in json.loads(md["shapes"]).items()}
            granularity = md["granularity"]
            lam = float(md["lambda_scale"])
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"{path}: malformed importance metadata ({exc})") from None
        if set(shapes) != set(store.names()) or granularity not in GRANULARITIES:
            raise FormatError(f"{path}: malformed importance metadata")
        return cls(store, shapes, granularity, lam)


def importance(base: Store, probe_trained: Store, granularity: str = "scalar",
               lambda_scale: float = 1.0) -> ImportanceMap:
    """Score every floating tensor by how far the probe run moved it."""
    if granularity not in GRANULARITIES:
        raise UsageError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")
    if not lambda_scale > 0:
        raise UsageError("lambda_scale must be positive")
    check_aligned(base, probe_trained)
    names = [n for n in base.names() if base.meta(n).dtype.is_float and probe_trained.meta(n).dtype.is_float]
    shapes = {n: base.meta(n).shape for n in names}

    def compute(name: str) -> np.ndarray:
        d = probe_trained.read(name) - base.read(name)
        if granularity == "scalar":
            return np.abs(d).ravel()
        rows = d.reshape(_units(d.shape, "row"), -1).astype(np.float64)
        sq = np.add.accumulate(rows * rows, axis=1)[:, -1] if rows.shape[1] else np.zeros(len(rows))
        return np.sqrt(sq)

    metas = [TensorMeta(n, DType.F32, (_units(shapes[n], granularity),)) for n in names]
    return ImportanceMap(LazyStore(metas, compute, {"kind": "importance"}), shapes, granularity, float(lambda_scale))


# ---------------------------------------------------------------------------
# masks


@dataclass(eq=False)
class NeuronMask:
    """Selected flat indices per tensor over a fixed tensor universe.

    ``universe`` maps every maskable tensor to its element count.  Tensors
    with no selected index are absent from ``selected``.  ``n_units`` counts
    selection units (scalars or rows) and ``total_units`` the eligible units
    the selection was drawn from.
    """

    selected: dict[str, np.ndarray]
    universe: dict[str, int]
    total_units: int
    k_percent: float
    granularity: str = "scalar"
    n_units: int = field(default=-1)

    def __post_init__(self):
        clean = {}
        for name, idx in sorted(self.selected.items()):
            idx = np.asarray(idx, dtype=np.uint64).ravel()
            if name not in self.universe:
                raise AlignmentError(f"mask tensor {name!r} is outside the universe")
            if idx.size:
                if np.any(idx[1:] <= idx[:-1]):
                    raise FormatError(f"mask indices for {name!r} are not strictly ascending")
                if int(idx[-1]) >= self.universe[name]:
                    raise FormatError(f"mask index out of range for {name!r}")
                clean[name] = idx
        self.selected = clean
        if self.n_units < 0:
            self.n_units = self.size

    @property
    def size(self) -> int:
        return sum(int(v.size) for v in self.selected.values())

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NeuronMask):
            return NotImplemented
        return (self.universe == other.universe and self.selected.keys() == other.selected.keys()
                and all(np.array_equal(v, other.selected[k]) for k, v in self.selected.items()))

    def indices(self, name: str) -> np.ndarray:
        return self.selected.get(name, np.zeros(0, dtype=np.uint64))

    def as_set(self) -> set[tuple[str, int]]:
        return {(n, int(i)) for n, idx in self.selected.items() for i in idx}

    @classmethod
    def empty(cls, universe: Mapping[str, int]) -> "NeuronMask":
        return cls({}, dict(universe), sum(universe.values()), 0.0)

    @classmethod
    def full(cls, universe: Mapping[str, int]) -> "NeuronMask":
        sel = {n: np.arange(c, dtype=np.uint64) for n, c in universe.items()}
        return cls(sel, dict(universe), sum(universe.values()), 100.0)


def universe_of(store: Store) -> dict[str, int]:
    return {n: store.meta(n).numel for n in store.names() if store.meta(n).dtype.is_float}


def top_k_mask(imp: ImportanceMap, k_percent: float, include: Sequence[str] | None = None,
               exclude: Sequence[str] | None = None) -> NeuronMask:
    """Select the top ``k_percent`` units jointly across eligible tensors.

    Ties are broken by tensor name, then flat index, both ascending.
    """
    k_percent = check_percent(k_percent, "k1")
    keep = name_filter(include, exclude)
    eligible = [n for n in imp.names() if keep(n)]
    n_total = sum(imp.units(n) for n in eligible)
    if n_total == 0:
        raise UsageError("no eligible units for top-k selection")
    k = percent_count(k_percent, n_total)

    # per-tensor candidate lists, merged by one deterministic global sort
    cand_score, cand_rank, cand_idx = [], [], []
    for rank, name in enumerate(eligible):
        s = imp.score(name)
        order = np.argsort(-s, kind="stable")[:k]
        cand_score.append(s[order])
        cand_rank.append(np.full(order.size, rank, dtype=np.int64))
        cand_idx.append(order.astype(np.int64))
    score = np.concatenate(cand_score)
    rank = np.concatenate(cand_rank)
    idx = np.concatenate(cand_idx)
    chosen = np.lexsort((idx, rank, -score))[:k]

    universe = {n: math.prod(imp.shapes[n]) for n in imp.names()}
    selected = {}
    for r in np.unique(rank[chosen]):
        name = eligible[int(r)]
        units = np.sort(idx[chosen][rank[chosen] == r])
        if imp.granularity == "row":
            shape = imp.shapes[name]
            width = universe[name] // max(1, _units(shape, "row"))
            units = (units[:, None] * width + np.arange(width)[None, :]).ravel()
        selected[name] = units.astype(np.uint64)
    return NeuronMask(selected, universe, n_total, k_percent, imp.granularity, n_units=k)


def _combine_masks(a: NeuronMask, b: NeuronMask, op) -> NeuronMask:
    if a.universe != b.universe:
        raise AlignmentError("masks cover incompatible tensor universes")
    selected = {}
    for name in sorted(set(a.selected) | set(b.selected)):
        out = op(a.indices(name), b.indices(name))
        if out.size:
            selected[name] = out.astype(np.uint64)
    if a.granularity == b.granularity == "scalar" and a.total_units == b.total_units:
        total = a.total_units
    else:
        total = sum(a.universe.values())
    size = sum(v.size for v in selected.values())
    return NeuronMask(selected, dict(a.universe), total, 100.0 * size / total if total else 0.0, "scalar")


def mask_union(a: NeuronMask, b: NeuronMask) -> NeuronMask:
    return _combine_masks(a, b, np.union1d)


def mask_intersect(a: NeuronMask, b: NeuronMask) -> NeuronMask:
    return _combine_masks(a, b, lambda x, y: np.intersect1d(x, y, assume_unique=True))


def project_update(base: Store, trained: Store, mask: NeuronMask) -> LazyStore:
    """``base`` everywhere except masked indices, which take ``trained``'s values."""
    names = check_aligned(base, trained)
    if mask.universe != universe_of(base):
        raise AlignmentError("mask universe does not match the checkpoint")

    def compute(name: str) -> np.ndarray:
        out = np.array(base.read(name))
        idx = mask.indices(name)
        if idx.size:
            flat = out.reshape(-1)
            flat[idx.astype(np.int64)] = trained.read(name).reshape(-1)[idx.astype(np.int64)]
        return out

    metas = [base.meta(n) for n in names]
    return LazyStore(metas, compute, {"kind": "projected", "base": base.identity, "trained": trained.identity})


# ---------------------------------------------------------------------------
# mask files


def export_mask(mask: NeuronMask, path: str | os.PathLike) -> None:
    store = MemoryStore(metadata={
        "kind": "mask",
        "universe": json.dumps(dict(sorted(mask.universe.items())), separators=(",", ":")),
        "total_units": str(mask.total_units),
        "n_units": str(mask.n_units),
        "k_percent": repr(float(mask.k_percent)),
        "granularity": mask.granularity,
    })
    for name, idx in mask.selected.items():
        store.add(name + MASK_SUFFIX, idx, DType.U64)
    save(store, path)


def import_mask(path: str | os.PathLike) -> NeuronMask:
    store = open_store(path)
    md = store.metadata
    if md.get("kind") != "mask":
        raise FormatError(f"{path}: not a mask file")
    try:
        universe = json.loads(md["universe"])
        total = int(md["total_units"])
        n_units = int(md["n_units"])
        k = float(md["k_percent"])
        granularity = md["granularity"]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: malformed mask metadata ({exc})") from None
    if not isinstance(universe, dict) or granularity not in GRANULARITIES:
        raise FormatError(f"{path}: malformed mask metadata")
    selected = {}
    for tname in store.names():
        meta = store.meta(tname)
        if not tname.endswith(MASK_SUFFIX) or meta.dtype is not DType.U64 or len(meta.shape) != 1:
            raise FormatError(f"{path}: malformed mask tensor {tname!r}")
        selected[tname[: -len(MASK_SUFFIX)]] = store.read(tname)
    try:
        return NeuronMask(selected, {k2: int(v) for k2, v in universe.items()}, total, k, granularity, n_units)
    except AlignmentError as exc:
        raise FormatError(f"{path}: {exc}") from None
