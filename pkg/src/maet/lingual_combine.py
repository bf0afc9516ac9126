from __future__ import annotations

import json
from typing import Sequence

from .delta_ops import linear_combine
from .errors import UsageError
from .tensor_store import LazyStore, Store


def resolve_mu(ids: Sequence[str], mu: dict[str, float] | None = None) -> dict[str, float]:
    """Per-language coefficients; any language without one gets ``1/n``."""
    mu = dict(mu or {})
    unknown = sorted(set(mu) - set(ids))
    if unknown:
        raise UsageError(f"mu given for unknown language {unknown[0]!r}")
    n = len(ids)
    return {i: float(mu.get(i, 1.0 / n)) for i in ids}


def combine(items: Sequence[tuple[str, Store, float | None]]) -> LazyStore:
    """Multi-lingual weight ``sum(mu_i * R(L_i))``.

    Items are ``(language id, language weight, mu or None)``.  Accumulation
    runs in ascending language-id order regardless of input order, so the
    result is bit-identical under reordering.
    """
    if not items:
        raise UsageError("combine needs at least one language weight")
    ids = [str(i) for i, _, _ in items]
    if len(set(ids)) != len(ids):
        raise UsageError("language ids must be unique")
    mu = resolve_mu(ids, {str(i): m for i, _, m in items if m is not None})
    ordered = sorted(((str(i), w) for i, w, _ in items), key=lambda t: t[0])
    return linear_combine(
        [(w, mu[i]) for i, w in ordered],
        metadata={"kind": "multilingual", "mu": json.dumps({i: mu[i] for i, _ in ordered})},
    )
