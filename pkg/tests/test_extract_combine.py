import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maet.ability_extract import DEFAULT_ALPHA, DEFAULT_BETA, extract_ability, extract_language
from maet.delta_ops import diff
from maet.errors import AlignmentError, UsageError
from maet.lingual_combine import combine

from conftest import make_store, random_store

SHAPES = {"a": (4, 3), "b": (5,)}


def test_defaults():
    assert (DEFAULT_ALPHA, DEFAULT_BETA) == (0.8, 0.2)


def test_extract_example():
    base = make_store({"t": [0.0, 0.0]})
    tal = make_store({"t": [1.0, 0.0]})
    tl = make_store({"t": [0.5, 0.5]})
    r = extract_ability(tal, tl, base)
    np.testing.assert_allclose(r.read("t"), np.float32([0.7, -0.1]), rtol=1e-7)
    assert r.metadata["kind"] == "ability" and r.metadata["alpha"] == "0.8"


def test_beta_zero_is_bitwise_diff(rng):
    base, tal, tl = (random_store(rng, SHAPES) for _ in range(3))
    r = extract_ability(tal, tl, base, 1.0, 0.0)
    d = diff(tal, base)
    for name in SHAPES:
        assert r.read(name).tobytes() == d.read(name).tobytes()


def test_zero_law(rng):
    base = random_store(rng, SHAPES)
    for alpha, beta in ((0.8, 0.2), (3.0, -1.0)):
        for _, arr in extract_ability(base, base, base, alpha, beta).items():
            assert not arr.any()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-4, 4), st.floats(-4, 4))
def test_bilinear_against_components(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    base, tal, tl = (random_store(rng, SHAPES) for _ in range(3))
    r = extract_ability(tal, tl, base, alpha, beta)
    for name in SHAPES:
        d1 = diff(tal, base).read(name).astype(np.float64)
        d2 = diff(tl, base).read(name).astype(np.float64)
        np.testing.assert_array_equal(r.read(name), (alpha * d1 - beta * d2).astype(np.float32))


def test_extract_misaligned():
    with pytest.raises(AlignmentError):
        extract_ability(make_store({"t": [1]}), make_store({"u": [1]}), make_store({"t": [1]}))


def test_extract_language(rng):
    base = random_store(rng, SHAPES)
    trained = random_store(rng, SHAPES)
    lang = extract_language(trained, base, "fr")
    assert lang.metadata["kind"] == "language" and lang.metadata["language"] == "fr"
    via_ability = extract_ability(trained, base, base, 1.0, 0.0)
    for name in SHAPES:
        assert lang.read(name).tobytes() == via_ability.read(name).tobytes()
    for _, arr in extract_language(base, base).items():
        assert not arr.any()
    np.testing.assert_array_equal(
        extract_language(make_store({"t": [1.25, 0.5]}), make_store({"t": [1.0, 1.0]})).read("t"), [0.25, -0.5])


def test_combine_examples():
    r1, r2 = make_store({"t": [1, 0]}), make_store({"t": [0, 2]})
    np.testing.assert_array_equal(combine([("1", r1, 1.0)]).read("t"), r1.read("t"))
    np.testing.assert_array_equal(combine([("1", r1, 0.5), ("2", r2, 0.5)]).read("t"), [0.5, 1.0])
    np.testing.assert_array_equal(combine([("1", r1, None), ("2", r2, None)]).read("t"), [0.5, 1.0])
    assert not combine([("1", r1, 0.0), ("2", r2, 0.0)]).read("t").any()
    md = combine([("2", r2, 0.25), ("1", r1, None)]).metadata
    assert md["kind"] == "multilingual" and json.loads(md["mu"]) == {"1": 0.5, "2": 0.25}


def test_combine_errors():
    r = make_store({"t": [1.0]})
    with pytest.raises(UsageError):
        combine([])
    with pytest.raises(UsageError):
        combine([("1", r, 1.0), ("1", r, 1.0)])
    with pytest.raises(AlignmentError):
        combine([("1", r, 1.0), ("2", make_store({"u": [1.0]}), 1.0)])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.permutations(["1", "2", "3", "4"]))
def test_combine_order_invariant_bitwise(seed, order):
    rng = np.random.default_rng(seed)
    weights = {i: random_store(rng, {"t": (64,)}, 10.0 ** rng.integers(-3, 4)) for i in "1234"}
    mus = {i: float(rng.uniform(-1, 1)) for i in "1234"}
    ref = combine([(i, weights[i], mus[i]) for i in "1234"]).read("t")
    got = combine([(i, weights[i], mus[i]) for i in order]).read("t")
    assert ref.tobytes() == got.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_combine_linear_in_each_mu(seed):
    rng = np.random.default_rng(seed)
    w1, w2 = random_store(rng, {"t": (30,)}), random_store(rng, {"t": (30,)})
    m1, m2 = rng.integers(-32, 32, 2) / 8.0
    full = combine([("1", w1, m1), ("2", w2, m2)]).read("t").astype(np.float64)
    ref = m1 * w1.read("t").astype(np.float64) + m2 * w2.read("t").astype(np.float64)
    np.testing.assert_array_equal(full, ref.astype(np.float32))
