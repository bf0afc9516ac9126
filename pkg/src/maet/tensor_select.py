"""Rank tensors by ability/multilingual weight similarity and pick the tail."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from ._parallel import ordered_map
from .delta_ops import _cosine, check_aligned, tensor_norms
from .errors import FormatError, UsageError
from .neuron_importance import check_percent, name_filter, percent_count
from .tensor_store import Store, write_text_atomic

METRICS = ("dot", "cosine")
TAKES = ("last", "first")


@dataclass(frozen=True)
class SimilarityRow:
    name: str
    score: float
    metric: str = "dot"


@dataclass
class SimilarityReport:
    rows: list[SimilarityRow]
    metric: str = "dot"

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: (-r.score, r.name))

    def names(self) -> list[str]:
        return [r.name for r in self.rows]

    def scores(self) -> dict[str, float]:
        return {r.name: r.score for r in self.rows}


@dataclass
class TensorSelection:
    names: frozenset[str]
    k2_percent: float
    include: tuple[str, ...] = ()
    exclude: tuple[str, ...] = ()
    take: str = "last"
    eligible: int = field(default=0)

    def __contains__(self, name: object) -> bool:
        return name in self.names


def similarity_report(ability: Store, multilingual: Store, metric: str = "dot",
                      threads: int | None = None) -> SimilarityReport:
    """Per-tensor similarity between the two weights, sorted descending."""
    if metric not in METRICS:
        raise UsageError(f"metric must be one of {METRICS}, got {metric!r}")
    names = check_aligned(ability, multilingual, floating=True)

    def score(name: str) -> SimilarityRow:
        dot, na, nb, _ = tensor_norms(ability, multilingual, name)
        value = dot if metric == "dot" else _cosine(dot, na, nb, name)
        return SimilarityRow(name, value, metric)

    return SimilarityReport(list(ordered_map(score, names, threads)), metric)


def filter_patterns(report: SimilarityReport, include: Sequence[str] | None = None,
                    exclude: Sequence[str] | None = None) -> SimilarityReport:
    keep = name_filter(include, exclude)
    return SimilarityReport([r for r in report.rows if keep(r.name)], report.metric)


def select_last(report: SimilarityReport, k2_percent: float, include: Sequence[str] | None = None,
                exclude: Sequence[str] | None = None, take: str = "last") -> TensorSelection:
    """The ``ceil(k2/100 * M)`` lowest-similarity eligible tensors.

    Ties at the boundary enter the selection by ascending name.  ``take="first"``
    selects the highest-similarity head instead.
    """
    k2_percent = check_percent(k2_percent, "k2")
    if take not in TAKES:
        raise UsageError(f"take must be one of {TAKES}, got {take!r}")
    rows = filter_patterns(report, include, exclude).rows
    if not rows:
        raise UsageError("no eligible tensors left after filtering")
    count = percent_count(k2_percent, len(rows))
    sign = 1.0 if take == "last" else -1.0
    ranked = sorted(rows, key=lambda r: (sign * r.score, r.name))
    return TensorSelection(frozenset(r.name for r in ranked[:count]), k2_percent,
                           tuple(include or ()), tuple(exclude or ()), take, len(rows))


def write_selection(report: SimilarityReport, selection: TensorSelection, path: str | os.PathLike) -> None:
    """Report rows with selected flags plus the selected name list, as JSON."""
    doc = {
        "kind": "selection",
        "metric": report.metric,
        "k2_percent": selection.k2_percent,
        "take": selection.take,
        "include": list(selection.include),
        "exclude": list(selection.exclude),
        "rows": [{"name": r.name, "score": r.score, "selected": r.name in selection.names} for r in report.rows],
        "selected": sorted(selection.names),
    }
    write_text_atomic(path, json.dumps(doc, indent=1) + "\n")


def read_selection(path: str | os.PathLike) -> TensorSelection:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("kind") != "selection":
            raise FormatError(f"{path}: not a selection file")
        names = doc["selected"]
        if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
            raise FormatError(f"{path}: 'selected' must be a list of tensor names")
        return TensorSelection(frozenset(names), float(doc.get("k2_percent", 100.0)),
                               tuple(doc.get("include", ())), tuple(doc.get("exclude", ())),
                               doc.get("take", "last"), len(doc.get("rows", names)))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
        raise FormatError(f"{path}: malformed selection file ({exc})") from None
