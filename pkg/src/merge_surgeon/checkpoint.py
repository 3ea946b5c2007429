"""Bit-exact binary checkpoint format for parameter collections.

Layout::

    bytes 0..7    magic b"MSRG0001"
    bytes 8..15   little-endian uint64 header length H
    bytes 16..    UTF-8 JSON header: {"tensors": [{name, shape, offset}, ...]}
    bytes 16+H..  contiguous little-endian float32 payloads in header order

Offsets are relative to the start of the payload region and must be
contiguous; a round-trip through save/load is bitwise stable.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensors import ParamSet

MAGIC = b"MSRG0001"


class CheckpointError(Exception):
    """Base class for checkpoint file problems."""


class BadMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class TruncatedError(CheckpointError):
    """File ends before the declared header or payload is complete."""


class NonFiniteError(CheckpointError):
    """Payload contains NaN or Inf values."""


class HeaderError(CheckpointError):
    """Header is not valid JSON or describes an inconsistent layout."""


def save_paramset(params: ParamSet, path) -> None:
    entries = []
    offset = 0
    payloads = []
    for name, value in params.items():
        data = np.ascontiguousarray(value, dtype="<f4")
        entries.append({"name": name, "shape": list(value.shape), "offset": offset})
        payloads.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({"tensors": entries}, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def load_paramset(path) -> ParamSet:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC):
        raise TruncatedError(f"{path}: file shorter than magic")
    if raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    if len(raw) < 16:
        raise TruncatedError(f"{path}: missing header length")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    header_end = 16 + header_len
    if len(raw) < header_end:
        raise TruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(raw[16:header_end].decode("utf-8"))
        descriptors = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise HeaderError(f"{path}: unreadable header ({exc})") from exc

    payload = raw[header_end:]
    entries = []
    expected_offset = 0
    seen = set()
    for desc in descriptors:
        try:
            name = desc["name"]
            shape = tuple(int(d) for d in desc["shape"])
            offset = int(desc["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise HeaderError(f"{path}: malformed tensor descriptor ({exc})") from exc
        if name in seen:
            raise HeaderError(f"{path}: duplicate tensor name {name!r}")
        seen.add(name)
        if any(d < 1 for d in shape):
            raise HeaderError(f"{path}: non-positive dimension in shape {shape}")
        if offset != expected_offset:
            raise HeaderError(
                f"{path}: non-contiguous payload (tensor {name!r} at {offset}, "
                f"expected {expected_offset})"
            )
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(payload):
            raise TruncatedError(f"{path}: payload truncated at tensor {name!r}")
        data = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{path}: non-finite values in tensor {name!r}")
        entries.append((name, data.reshape(shape)))
        expected_offset = offset + nbytes
    if expected_offset != len(payload):
        raise HeaderError(
            f"{path}: {len(payload) - expected_offset} trailing payload bytes"
        )
    return ParamSet(entries)
