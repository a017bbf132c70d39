import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from duetdance.archive import archive_hash, read_archive, write_archive
from duetdance.errors import DuetError


def test_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    entries = {
        "weights": rng.normal(size=(7, 5)).astype(np.float32),
        "codes": rng.normal(size=(4, 3)),
        "counts": rng.integers(0, 100, size=11),
        "flags": rng.integers(0, 2, size=6).astype(np.uint8),
    }
    write_archive(tmp_path / "a", entries, "test-v1", metadata={"seed": 0})
    loaded, manifest = read_archive(tmp_path / "a", expected_format="test-v1")
    assert manifest.metadata["seed"] == 0
    for name, arr in entries.items():
        assert loaded[name].dtype == arr.dtype
        assert np.array_equal(loaded[name], arr)
        assert loaded[name].tobytes() == arr.tobytes()


@given(arrays(dtype=np.float64, shape=st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
@settings(max_examples=25, deadline=None)
def test_roundtrip_property(tmp_path_factory, x):
    path = tmp_path_factory.mktemp("arch")
    write_archive(path / "x", {"x": x}, "test-v1")
    loaded, _ = read_archive(path / "x")
    assert np.array_equal(loaded["x"], x)


def test_payload_size_rule(tmp_path):
    arr = np.zeros((3, 2), dtype=np.float32)
    write_archive(tmp_path / "a", {"arr": arr}, "test-v1")
    _, manifest = read_archive(tmp_path / "a")
    assert manifest.entries[0]["nbytes"] == 24  # 4 bytes x 6 elements


def test_truncated_payload_rejected(tmp_path):
    write_archive(tmp_path / "a", {"x": np.zeros(10)}, "test-v1")
    payload = tmp_path / "a" / "entry_0000.bin"
    payload.write_bytes(payload.read_bytes()[:-8])
    with pytest.raises(DuetError) as exc:
        read_archive(tmp_path / "a")
    assert exc.value.code == "corrupt-archive"


def test_unknown_format_rejected(tmp_path):
    write_archive(tmp_path / "a", {"x": np.zeros(3)}, "test-v1")
    with pytest.raises(DuetError) as exc:
        read_archive(tmp_path / "a", expected_format="other-v1")
    assert exc.value.code == "unsupported-format"


def test_two_writes_bit_identical(tmp_path):
    rng = np.random.default_rng(1)
    entries = {"a": rng.normal(size=(5, 5)), "b": rng.integers(0, 9, size=4)}
    write_archive(tmp_path / "w1", entries, "test-v1", metadata={"k": "v"})
    write_archive(tmp_path / "w2", entries, "test-v1", metadata={"k": "v"})
    assert archive_hash(tmp_path / "w1") == archive_hash(tmp_path / "w2")


def test_endianness_and_order_invariance(tmp_path):
    base = np.arange(12, dtype=np.float64).reshape(3, 4)
    variants = {
        "c_order": base.copy(),
        "f_order": np.asfortranarray(base),
        "big_endian": base.astype(">f8"),
        "strided": np.ascontiguousarray(base[::1])[:, ::1],
    }
    hashes = set()
    for name, arr in variants.items():
        write_archive(tmp_path / name, {"x": arr}, "test-v1")
        loaded, _ = read_archive(tmp_path / name)
        assert np.array_equal(loaded["x"].astype(np.float64), base)
        hashes.add(archive_hash(tmp_path / name))
    assert len(hashes) == 1  # identical bytes regardless of source layout
