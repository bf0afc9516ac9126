import json
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maet.errors import AlignmentError, EncodeError, FormatError, NonFiniteError, UsageError
from maet.tensor_store import (DType, LazyStore, MemoryStore, TensorMeta, decode, encode, open_store,
                               read_tensor, save, write_store)


def raw_file(path, header: dict, data: bytes, header_len=None):
    text = json.dumps(header).encode()
    n = len(text) if header_len is None else header_len
    path.write_bytes(struct.pack("<Q", n) + text + data)
    return path


def bf16_oracle(bits: int) -> float:
    """Manual sign/exponent/mantissa decomposition of a bfloat16 pattern."""
    sign = -1.0 if bits >> 15 else 1.0
    exp = (bits >> 7) & 0xFF
    frac = bits & 0x7F
    if exp == 0:
        return sign * frac / 128 * 2.0 ** -126
    return sign * (1 + frac / 128) * 2.0 ** (exp - 127)


def test_dtype_widths():
    assert [d.width for d in (DType.F32, DType.F16, DType.BF16, DType.U64)] == [4, 2, 2, 8]


def test_identity_payload_round_trips(tmp_path):
    path = raw_file(tmp_path / "w.st", {"w": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]}},
                    struct.pack("<4f", 1, 0, 0, 1))
    store = open_store(path)
    assert store.names() == ["w"]
    np.testing.assert_array_equal(read_tensor(store, "w"), [[1, 0], [0, 1]])


def test_header_longer_than_file(tmp_path):
    path = raw_file(tmp_path / "bad.st", {}, b"", header_len=10_000)
    with pytest.raises(FormatError, match="malformed header"):
        open_store(path)


@pytest.mark.parametrize("header, data, match", [
    ({"w": {"dtype": "F32", "shape": [2], "data_offsets": [0, 4]}}, b"\0" * 8, "declared size mismatch"),
    ({"w": {"dtype": "I8", "shape": [2], "data_offsets": [0, 2]}}, b"\0" * 2, "unknown dtype"),
    ({"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
      "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]}}, b"\0" * 12, "overlapping"),
    ({"w": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]}}, b"\0" * 8, "out of bounds"),
    ({"w": {"dtype": "F32", "shape": [-1], "data_offsets": [0, 0]}}, b"", "non-negative"),
    ({"w": {"dtype": "F32", "shape": [1]}}, b"\0" * 4, "bad entry"),
    ({"__metadata__": {"a": 1}}, b"", "__metadata__"),
    ([], b"", "not an object"),
])
def test_malformed_files(tmp_path, header, data, match):
    with pytest.raises(FormatError, match=match):
        open_store(raw_file(tmp_path / "bad.st", header, data))


def test_duplicate_names_rejected(tmp_path):
    text = b'{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}'
    path = tmp_path / "dup.st"
    path.write_bytes(struct.pack("<Q", len(text)) + text + b"\0" * 4)
    with pytest.raises(FormatError, match="duplicate"):
        open_store(path)


def test_f16_widening_is_exact(tmp_path):
    write_store([("h", "F16", [3], [1.0, -2.5, 0.0009765625])], {}, tmp_path / "h.st")
    np.testing.assert_array_equal(open_store(tmp_path / "h.st").read("h"), np.float32([1.0, -2.5, 0.0009765625]))


@pytest.mark.parametrize("bits", [0x3F80, 0xBF80, 0x4049, 0x0001, 0x7F7F, 0x3E20])
def test_bf16_decode_matches_bit_decomposition(bits):
    got = decode(struct.pack("<H", bits), DType.BF16, [1])
    assert got[0] == np.float32(bf16_oracle(bits))


def test_bf16_narrowing_rounds_to_nearest_even(tmp_path):
    write_store([("b", "BF16", [1], [1.0000001])], {}, tmp_path / "b.st")
    assert open_store(tmp_path / "b.st").read("b")[0] == 1.0


def test_bf16_ties_go_to_even():
    # 1 + 2^-8 sits exactly between bf16 neighbours 1 and 1 + 2^-7
    tie = np.float32(1 + 2.0 ** -8)
    assert struct.unpack("<H", encode([tie], DType.BF16))[0] == 0x3F80
    tie_up = np.float32(1 + 3 * 2.0 ** -8)
    assert struct.unpack("<H", encode([tie_up], DType.BF16))[0] == 0x3F82


def test_u64_passthrough(tmp_path):
    write_store([("i", "U64", [3], np.array([0, 5, 7], dtype=np.uint64))], {}, tmp_path / "i.st")
    got = open_store(tmp_path / "i.st").read("i")
    assert got.dtype == np.uint64
    assert got.tolist() == [0, 5, 7]


def test_canonical_order_ignores_input_order(tmp_path):
    write_store([("b", "F32", [1], [2.0]), ("a", "F32", [1], [1.0])], {}, tmp_path / "ab.st")
    store = open_store(tmp_path / "ab.st")
    assert store.meta("a").data_offsets == (0, 4)
    assert store.meta("b").data_offsets == (4, 8)
    raw = (tmp_path / "ab.st").read_bytes()
    assert raw[-8:] == struct.pack("<2f", 1.0, 2.0)


def test_write_errors(tmp_path):
    with pytest.raises(UsageError, match="duplicate"):
        write_store([("a", "F32", [1], [1.0]), ("a", "F32", [1], [1.0])], {}, tmp_path / "x.st")
    with pytest.raises(UsageError, match="values for shape"):
        write_store([("a", "F32", [3], [1.0])], {}, tmp_path / "x.st")
    with pytest.raises(EncodeError):
        write_store([("a", "F16", [1], [1e6])], {}, tmp_path / "x.st")
    with pytest.raises(EncodeError):
        write_store([("a", "BF16", [1], [3.4e38])], {}, tmp_path / "x.st")
    with pytest.raises(EncodeError):
        write_store([("a", "F32", [1], [np.nan])], {}, tmp_path / "x.st")
    assert not (tmp_path / "x.st").exists()
    assert not list(tmp_path.glob("*.partial"))


def test_non_finite_read_reports_name_and_index(tmp_path):
    path = raw_file(tmp_path / "n.st", {"w": {"dtype": "F32", "shape": [3], "data_offsets": [0, 12]}},
                    struct.pack("<3f", 1.0, float("inf"), float("nan")))
    with pytest.raises(NonFiniteError) as info:
        open_store(path).read("w")
    assert info.value.name == "w" and info.value.index == 1


def test_unknown_name(tmp_path):
    write_store([("a", "F32", [1], [1.0])], {}, tmp_path / "a.st")
    with pytest.raises(AlignmentError):
        open_store(tmp_path / "a.st").read("missing")


def test_metadata_round_trip(tmp_path):
    write_store([("a", "F32", [1], [1.0])], {"stage": "extract", "alpha": "0.8"}, tmp_path / "a.st")
    assert open_store(tmp_path / "a.st").metadata == {"stage": "extract", "alpha": "0.8"}


def test_header_is_padded_and_minimal(tmp_path):
    write_store([("a", "F32", [1], [1.0])], {}, tmp_path / "a.st")
    raw = (tmp_path / "a.st").read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    assert n % 8 == 0
    assert json.loads(raw[8:8 + n]) == {"a": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}}


def test_lazy_store_streams_and_checks(tmp_path):
    calls = []

    def fn(name):
        calls.append(name)
        return np.full(2, 1.0 if name == "ok" else np.inf)

    lazy = LazyStore([TensorMeta("ok", DType.F32, (2,)), TensorMeta("bad", DType.F32, (2,))], fn)
    np.testing.assert_array_equal(lazy.read("ok"), [1.0, 1.0])
    with pytest.raises(NonFiniteError):
        lazy.read("bad")
    with pytest.raises(EncodeError):
        save(lazy, tmp_path / "x.st")


def test_iteration_is_deterministic(tmp_path, rng):
    store = MemoryStore({f"t{i}": rng.standard_normal(5).astype(np.float32) for i in (3, 1, 2)})
    save(store, tmp_path / "s.st")
    opened = open_store(tmp_path / "s.st")
    first = [(n, a.tobytes()) for n, a in opened.items()]
    second = [(n, a.tobytes()) for n, a in opened.items()]
    assert first == second
    assert [n for n, _ in first] == ["t1", "t2", "t3"]


def test_concurrent_readers(tmp_path, rng):
    arrays = {f"t{i:02d}": rng.standard_normal(1000).astype(np.float32) for i in range(20)}
    save(MemoryStore(arrays), tmp_path / "s.st")
    store = open_store(tmp_path / "s.st")
    errors = []

    def reader(names):
        for n in names:
            if not np.array_equal(store.read(n), arrays[n]):
                errors.append(n)

    threads = [threading.Thread(target=reader, args=(sorted(arrays)[i::4],)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


def test_interop_with_safetensors_package(tmp_path, rng):
    safetensors_numpy = pytest.importorskip("safetensors.numpy")
    arrays = {"w": rng.standard_normal((3, 4)).astype(np.float32), "h": np.float16([1.5, -2.0]),
              "i": np.array([1, 2, 3], dtype=np.uint64)}
    safetensors_numpy.save_file(arrays, str(tmp_path / "ref.st"), metadata={"k": "v"})
    store = open_store(tmp_path / "ref.st")
    assert store.metadata == {"k": "v"}
    for name, arr in arrays.items():
        np.testing.assert_array_equal(store.read(name), arr)
    save(store, tmp_path / "ours.st")
    back = safetensors_numpy.load_file(str(tmp_path / "ours.st"))
    for name, arr in arrays.items():
        np.testing.assert_array_equal(back[name], arr)
        assert back[name].dtype == arr.dtype


# fuzz: arbitrary valid stores survive a write/open cycle


_dtypes = st.sampled_from(["F32", "F16", "BF16", "U64"])
_shapes = st.lists(st.integers(0, 4), min_size=0, max_size=3)


@st.composite
def stores(draw):
    names = draw(st.lists(st.text("abcxyz._0123456789", min_size=1, max_size=8), min_size=0, max_size=5,
                          unique=True).filter(lambda ns: "__metadata__" not in ns))
    entries = []
    for name in names:
        dtype = draw(_dtypes)
        shape = draw(_shapes)
        n = int(np.prod(shape))
        if dtype == "U64":
            vals = draw(st.lists(st.integers(0, 2**64 - 1), min_size=n, max_size=n))
            vals = np.array(vals, dtype=np.uint64)
        else:
            vals = np.array(draw(st.lists(st.floats(-6e4, 6e4, width=32), min_size=n, max_size=n)), dtype=np.float32)
        entries.append((name, dtype, shape, vals))
    metadata = draw(st.dictionaries(st.text(min_size=1, max_size=5).filter(lambda k: k != "__metadata__"),
                                    st.text(max_size=5), max_size=3))
    return entries, metadata


@settings(max_examples=60, deadline=None)
@given(stores())
def test_fuzz_round_trip(tmp_path_factory, case):
    entries, metadata = case
    d = tmp_path_factory.mktemp("fuzz")
    write_store(entries, metadata, d / "a.st")
    first = open_store(d / "a.st")
    assert first.metadata == metadata
    save(first, d / "b.st")
    assert (d / "a.st").read_bytes() == (d / "b.st").read_bytes()
    for name, dtype, shape, vals in entries:
        got = first.read(name)
        assert got.shape == tuple(shape)
        if dtype in ("F32", "U64"):
            np.testing.assert_array_equal(got.ravel(), vals)
