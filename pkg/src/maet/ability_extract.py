"""Ability- and language-specific weights as weighted parameter deltas."""

from __future__ import annotations

from .delta_ops import check_aligned, diff, linear_combine
from .tensor_store import LazyStore, Store

DEFAULT_ALPHA = 0.8
DEFAULT_BETA = 0.2


def extract_ability(theta_ability_lang: Store, theta_lang: Store, theta_base: Store,
                    alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA,
                    ability: str = "ability") -> LazyStore:
    """``alpha * (theta_ability_lang - base) - beta * (theta_lang - base)``.

    ``theta_ability_lang`` was trained on the ability + general mixture over
    the ability and reference-language neurons; ``theta_lang`` on the
    reference language over its own neurons only.
    """
    check_aligned(theta_ability_lang, theta_lang, theta_base, floating=True)
    return linear_combine(
        [(diff(theta_ability_lang, theta_base), alpha), (diff(theta_lang, theta_base), -float(beta))],
        metadata={"kind": "ability", "ability": str(ability), "alpha": repr(float(alpha)), "beta": repr(float(beta))},
    )


def extract_language(theta_lang_trained: Store, theta_base: Store, language: str = "language",
                     reference: Store | None = None, alpha: float = 1.0, beta: float = 0.0) -> LazyStore:
    """Language weight; the plain delta unless a reference model is supplied."""
    terms = [(diff(theta_lang_trained, theta_base), alpha)]
    if reference is not None:
        terms.append((diff(reference, theta_base), -float(beta)))
    return linear_combine(terms, metadata={
        "kind": "language", "language": str(language), "alpha": repr(float(alpha)), "beta": repr(float(beta)),
    })
