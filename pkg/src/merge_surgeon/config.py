"""Run configuration: flat key = value files, defaults, and validation.

Precedence is flags over config-file values over defaults.  Unknown keys
are rejected so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

THREADS_ENV = "MERGE_SURGEON_THREADS"


class ConfigError(ValueError):
    """Malformed config text, unknown key, or out-of-range value."""


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment; blanks ignored."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config_file(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path))


def _parse_int(key, value):
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {value!r}") from None


def _parse_float(key, value):
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {value!r}") from None


def _parse_int_list(key, value):
    try:
        return tuple(int(v) for v in str(value).split(","))
    except ValueError:
        raise ConfigError(f"{key} must be comma-separated integers, got {value!r}") from None


def _parse_float_list(key, value):
    try:
        return tuple(float(v) for v in str(value).split(","))
    except ValueError:
        raise ConfigError(f"{key} must be comma-separated numbers, got {value!r}") from None


@dataclass(frozen=True)
class RunConfig:
    """Every knob of the gen -> train -> merge -> surgery -> eval pipeline."""

    seed: int = 42
    tasks: int = 4
    dim: int = 16
    classes: int = 5
    n_train: int = 8000
    n_test: int = 2000
    hidden_dims: tuple[int, ...] = (32, 32, 32, 32, 32, 16)
    train_lr: float = 1e-3
    train_batch: int = 16
    pretrain_iters: int = 2000
    finetune_iters: int = 1000
    merge_algo: str = "ta"
    merge_scale: str = "grid"
    scale_grid: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    ties_keep: float = 0.5
    ada_iters: int = 200
    surgery_mode: str = "v2"
    surgery_rank: int = 16
    surgery_iters: int = 6000
    surgery_psi: str = "l1"
    surgery_data: str = "test"

    _PARSERS = {
        "seed": _parse_int,
        "tasks": _parse_int,
        "dim": _parse_int,
        "classes": _parse_int,
        "n_train": _parse_int,
        "n_test": _parse_int,
        "hidden_dims": _parse_int_list,
        "train_lr": _parse_float,
        "train_batch": _parse_int,
        "pretrain_iters": _parse_int,
        "finetune_iters": _parse_int,
        "merge_algo": lambda key, value: str(value),
        "merge_scale": lambda key, value: str(value),
        "scale_grid": _parse_float_list,
        "ties_keep": _parse_float,
        "ada_iters": _parse_int,
        "surgery_mode": lambda key, value: str(value),
        "surgery_rank": _parse_int,
        "surgery_iters": _parse_int,
        "surgery_psi": lambda key, value: str(value),
        "surgery_data": lambda key, value: str(value),
    }

    def __post_init__(self):
        if self.tasks < 1 or self.dim < 2 or self.classes < 2:
            raise ConfigError("need tasks >= 1, dim >= 2, classes >= 2")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("split sizes must be positive")
        if len(self.hidden_dims) < 2 or any(d < 1 for d in self.hidden_dims):
            raise ConfigError("hidden_dims needs at least two positive widths")
        if self.train_lr <= 0 or self.train_batch < 1:
            raise ConfigError("training settings out of range")
        if self.pretrain_iters < 1 or self.finetune_iters < 1:
            raise ConfigError("iteration counts must be >= 1")
        if self.merge_algo not in ("avg", "ta", "ties", "ada"):
            raise ConfigError(f"unknown algorithm {self.merge_algo!r}")
        if self.merge_scale != "grid":
            _parse_float("merge_scale", self.merge_scale)
        if not self.scale_grid:
            raise ConfigError("scale_grid must not be empty")
        if not 0 < self.ties_keep <= 1:
            raise ConfigError("ties_keep must lie in (0, 1]")
        if self.ada_iters < 1 or self.surgery_rank < 1 or self.surgery_iters < 1:
            raise ConfigError("iteration counts and rank must be >= 1")
        if self.surgery_mode != "none" and not (
            self.surgery_mode in ("v1", "v2") or self.surgery_mode.startswith("block:")
        ):
            raise ConfigError(f"unknown surgery mode {self.surgery_mode!r}")
        if self.surgery_psi not in ("l1", "mse", "cos"):
            raise ConfigError(f"unknown loss kind {self.surgery_psi!r}")
        if self.surgery_data != "test" and not (
            self.surgery_data.startswith("wild:") or self.surgery_data.startswith("stream:")
        ):
            raise ConfigError(f"unknown surgery data regime {self.surgery_data!r}")

    @classmethod
    def from_sources(cls, file_values=None, overrides=None) -> "RunConfig":
        """Layer defaults, then file values, then flag overrides."""
        merged: dict[str, object] = {}
        for source in (file_values or {}), (overrides or {}):
            for key, value in source.items():
                if value is None:
                    continue
                parser = cls._PARSERS.get(key)
                if parser is None:
                    raise ConfigError(f"unknown config key {key!r}")
                merged[key] = parser(key, value)
        return cls(**merged)

    def to_text(self) -> str:
        lines = []
        for item in fields(self):
            if item.name.startswith("_"):
                continue
            value = getattr(self, item.name)
            if isinstance(value, tuple):
                value = ",".join(f"{v:.9g}" if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, float):
                value = f"{value:.9g}"
            lines.append(f"{item.name} = {value}")
        return "\n".join(lines) + "\n"


def worker_count() -> int:
    """Worker cap from MERGE_SURGEON_THREADS; 0 or unset means auto."""
    raw = os.environ.get(THREADS_ENV, "0")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if value < 0:
        raise ConfigError(f"{THREADS_ENV} must be >= 0")
    return value if value > 0 else (os.cpu_count() or 1)


def map_over_tasks(fn, count: int) -> list:
    """Apply ``fn(task_index)`` for 0..count-1, in parallel when the worker
    cap allows; results are always ordered by task index."""
    workers = min(worker_count(), count)
    if workers <= 1 or count <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))
