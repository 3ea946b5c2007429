"""Binary checkpoint format: round trips and corruption handling."""

import struct

import numpy as np
import pytest

from merge_surgeon.checkpoint import (
    MAGIC,
    BadMagicError,
    HeaderError,
    NonFiniteError,
    TruncatedError,
    load_paramset,
    save_paramset,
)
from merge_surgeon.tensors import ParamSet, bitwise_equal


def random_paramset(rng, max_tensors=5):
    entries = []
    for i in range(rng.integers(1, max_tensors + 1)):
        ndim = int(rng.integers(1, 4))
        shape = tuple(int(rng.integers(1, 5)) for _ in range(ndim))
        entries.append((f"t{i}.weight", rng.standard_normal(shape)))
    return ParamSet(entries)


def test_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(3)
    for i in range(20):
        original = random_paramset(rng)
        path = tmp_path / f"p{i}.msrg"
        save_paramset(original, path)
        assert bitwise_equal(original, load_paramset(path))


def test_empty_paramset_round_trip(tmp_path):
    path = tmp_path / "empty.msrg"
    save_paramset(ParamSet(), path)
    loaded = load_paramset(path)
    assert len(loaded) == 0


def test_bad_magic(tmp_path):
    path = tmp_path / "p.msrg"
    save_paramset(ParamSet([("x", [1.0])]), path)
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        load_paramset(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "p.msrg"
    save_paramset(ParamSet([("x", np.arange(8, dtype=np.float32))]), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(TruncatedError):
        load_paramset(path)


def test_truncated_header(tmp_path):
    path = tmp_path / "p.msrg"
    save_paramset(ParamSet([("x", [1.0])]), path)
    path.write_bytes(path.read_bytes()[:12])
    with pytest.raises(TruncatedError):
        load_paramset(path)


def test_non_finite_payload(tmp_path):
    path = tmp_path / "p.msrg"
    save_paramset(ParamSet([("x", [1.0, 2.0])]), path)
    raw = bytearray(path.read_bytes())
    raw[-4:] = struct.pack("<f", float("nan"))
    path.write_bytes(bytes(raw))
    with pytest.raises(NonFiniteError):
        load_paramset(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "p.msrg"
    save_paramset(ParamSet([("x", [1.0])]), path)
    path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
    with pytest.raises(HeaderError):
        load_paramset(path)


def test_garbage_header(tmp_path):
    path = tmp_path / "p.msrg"
    header = b"this is not json"
    path.write_bytes(MAGIC + struct.pack("<Q", len(header)) + header)
    with pytest.raises(HeaderError):
        load_paramset(path)


def test_preserves_order_and_shapes(tmp_path):
    ps = ParamSet(
        [
            ("block2.weight", np.ones((3, 4), dtype=np.float32)),
            ("block1.weight", np.full((2, 2), -1.5, dtype=np.float32)),
            ("head.0.bias", np.zeros(5, dtype=np.float32)),
        ]
    )
    path = tmp_path / "ordered.msrg"
    save_paramset(ps, path)
    loaded = load_paramset(path)
    assert loaded.names() == ("block2.weight", "block1.weight", "head.0.bias")
    assert loaded["block2.weight"].shape == (3, 4)
