"""Float32 tensor values, named parameter collections, and the name scheme.

Parameter names follow a fixed contract: backbone entries are
``block{l}.weight`` / ``block{l}.bias`` with 1-based layer index ``l``,
task heads are ``head.{task}.weight`` / ``head.{task}.bias``.  The merge
and surgery code locates layers purely through these prefixes.
"""

from __future__ import annotations

import re
from collections.abc import Iterable, Iterator, Mapping

import numpy as np

_BLOCK_RE = re.compile(r"^block(\d+)\.(weight|bias)$")
_HEAD_RE = re.compile(r"^head\.([^.]+)\.(weight|bias)$")


class TensorError(ValueError):
    """Raised for non-finite values, bad shapes, or name violations."""


def as_tensor(values) -> np.ndarray:
    """Coerce ``values`` to a read-only, C-ordered float32 array.

    Rejects NaN/Inf and zero-length dimensions; every tensor in a
    parameter collection must hold at least one finite value.
    """
    arr = np.array(values, dtype=np.float32, order="C")
    if any(dim < 1 for dim in arr.shape):
        raise TensorError(f"tensor has a non-positive dimension: shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise TensorError("tensor contains non-finite values")
    arr.setflags(write=False)
    return arr


def block_name(layer: int, kind: str) -> str:
    return f"block{layer}.{kind}"


def head_name(task, kind: str) -> str:
    return f"head.{task}.{kind}"


def block_index(name: str) -> int | None:
    """Layer index of a backbone parameter name, or None for non-backbone."""
    m = _BLOCK_RE.match(name)
    return int(m.group(1)) if m else None


def head_task(name: str) -> str | None:
    """Task tag of a head parameter name, or None for non-head."""
    m = _HEAD_RE.match(name)
    return m.group(1) if m else None


def is_backbone_name(name: str) -> bool:
    return _BLOCK_RE.match(name) is not None


def is_head_name(name: str) -> bool:
    return _HEAD_RE.match(name) is not None


class ParamSet(Mapping):
    """Ordered, immutable mapping from parameter name to float32 array.

    Iteration order is insertion order.  Values are validated once at
    construction and shared read-only afterwards, so a ParamSet is safe
    to hand to concurrent readers.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        out: dict[str, np.ndarray] = {}
        for name, values in items:
            if not isinstance(name, str) or not name:
                raise TensorError(f"parameter name must be a non-empty string, got {name!r}")
            if name in out:
                raise TensorError(f"duplicate parameter name {name!r}")
            out[name] = as_tensor(values)
        self._entries = out

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}:{v.shape}" for n, v in self._entries.items())
        return f"ParamSet({inner})"

    def names(self) -> tuple[str, ...]:
        return tuple(self._entries)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: v.shape for n, v in self._entries.items()}

    def backbone(self) -> "ParamSet":
        """The block* entries, in insertion order."""
        return ParamSet((n, v) for n, v in self._entries.items() if is_backbone_name(n))

    def heads(self) -> "ParamSet":
        return ParamSet((n, v) for n, v in self._entries.items() if is_head_name(n))

    def head(self, task) -> "ParamSet":
        tag = str(task)
        found = ParamSet(
            (n, v) for n, v in self._entries.items() if head_task(n) == tag
        )
        if not found:
            raise KeyError(f"no head entries for task {task!r}")
        return found

    def num_blocks(self) -> int:
        indices = {block_index(n) for n in self._entries if is_backbone_name(n)}
        return max(indices) if indices else 0

    def merged_with(self, other: Mapping[str, np.ndarray]) -> "ParamSet":
        """New ParamSet with ``other``'s entries appended/replacing by name."""
        combined = dict(self._entries)
        for name, value in other.items():
            combined[name] = value
        return ParamSet(combined)


def shape_compatible(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> bool:
    """True iff ``a`` and ``b`` have identical name sets with identical shapes."""
    if set(a) != set(b):
        return False
    return all(a[n].shape == b[n].shape for n in a)


def bitwise_equal(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> bool:
    """True iff both collections hold the same names, order, and exact bytes."""
    if list(a) != list(b):
        return False
    return all(
        a[n].shape == b[n].shape and a[n].tobytes() == b[n].tobytes() for n in a
    )


def l1_mean_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute difference over all entries; accumulated in float64."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise TensorError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    return float(np.abs(diff).mean())
