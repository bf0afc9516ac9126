"""Final checkpoint assembly.

Tensors in the selection get ``base + gamma * ability + eta * multilingual``;
every other tensor gets ``base + multilingual`` (no ``eta``), unless
``eta_everywhere`` is set.  Output dtypes mirror the base checkpoint.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from ._parallel import ordered_map
from .delta_ops import check_aligned, combine_tensor
from .errors import AlignmentError, NonFiniteError
from .tensor_store import LazyStore, Store, TensorStore, save

DEFAULT_GAMMA = 0.2
DEFAULT_ETA = 1.0


@dataclass
class MergePlan:
    base: Store
    ability: Store
    multilingual: Store
    selection: Iterable[str]
    gamma: float = DEFAULT_GAMMA
    eta: float = DEFAULT_ETA
    eta_everywhere: bool = False

    def __post_init__(self):
        self.selection = frozenset(getattr(self.selection, "names", self.selection))

    def validate(self) -> list[str]:
        names = check_aligned(self.base, self.ability, self.multilingual, floating=True)
        unknown = sorted(self.selection - set(names))
        if unknown:
            raise AlignmentError(f"selected tensor {unknown[0]!r} is not in the checkpoint")
        return names

    def branch(self, name: str) -> str:
        return "selected" if name in self.selection else "unselected"

    def update(self, name: str) -> np.ndarray:
        """Float64 update added to the base tensor."""
        if name in self.selection:
            terms = [(self.ability, self.gamma), (self.multilingual, self.eta)]
        else:
            terms = [(self.multilingual, self.eta if self.eta_everywhere else 1.0)]
        return combine_tensor(terms, name)


def _merged(plan: MergePlan, name: str) -> np.ndarray:
    upd = plan.update(name)
    out = plan.base.read(name).astype(np.float64)
    # adding an exact zero must leave the base value (and its sign) untouched
    np.add(out, upd, out=out, where=upd != 0.0)
    del upd
    with np.errstate(over="ignore"):
        out32 = out.astype(np.float32)
    del out
    bad = ~np.isfinite(out32)
    if bad.any():
        raise NonFiniteError(name, int(np.flatnonzero(bad.ravel())[0]), "merged value")
    return out32


def merge(plan: MergePlan) -> LazyStore:
    names = plan.validate()
    metas = [plan.base.meta(n) for n in names]
    return LazyStore(metas, lambda name: _merged(plan, name), merge_metadata(plan))


def merge_metadata(plan: MergePlan, digests: bool = False) -> dict[str, str]:
    md = {
        "kind": "merged",
        "gamma": repr(float(plan.gamma)),
        "eta": repr(float(plan.eta)),
        "eta_everywhere": str(bool(plan.eta_everywhere)).lower(),
        "selected": ",".join(sorted(plan.selection)),
    }
    for role in ("base", "ability", "multilingual"):
        store = getattr(plan, role)
        if digests and isinstance(store, TensorStore):
            md[f"{role}_digest"] = store.digest()
    return md


def write_merged(plan: MergePlan, path: str | os.PathLike, threads: int | None = None) -> None:
    """Merge and stream the result to ``path`` with provenance metadata."""
    merged = merge(plan)
    save(merged, path, metadata=merge_metadata(plan, digests=True), threads=threads)


@dataclass
class SummaryRow:
    name: str
    branch: str
    max_abs_update: float
    dtype: str


@dataclass
class MergeSummary:
    rows: list[SummaryRow] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"rows": [vars(r) for r in self.rows]}


def dry_run(plan: MergePlan, threads: int | None = None) -> MergeSummary:
    """Everything ``merge`` would do, minus the file: one row per tensor."""
    names = plan.validate()

    def row(name: str) -> SummaryRow:
        _merged(plan, name)  # surfaces non-finite results without writing
        delta = np.abs(plan.update(name))
        return SummaryRow(name, plan.branch(name), float(delta.max()) if delta.size else 0.0,
                          plan.base.meta(name).dtype.value)

    return MergeSummary(list(ordered_map(row, names, threads)))
