"""Task-private adapter stacks that realign merged-model representations.

An adapter computes ``omega(Z) = up @ relu(down @ Z)`` and the corrected
representation is ``Z - omega(Z)``, applied in the forward path so the
next block consumes the corrected value.  Last-layer-only stacks mirror
the cheap variant; all-layer stacks correct every block; single-block
stacks exist for ablation.  Training is unsupervised: targets are the
expert model's representations on unlabeled inputs.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .bias import LossKind, alignment_loss_and_grad
from .network import ModelSpec, RepTrace, TrainConfig, block_name, forward_layers, to_float64
from .tensors import ParamSet

_LAST_LAYER = "last_layer"
_ALL_LAYERS = "all_layers"
_SINGLE_BLOCK = "single_block"


class SurgeryError(ValueError):
    """Invalid stack layout, data regime, or diverging surgery training."""


@dataclass(frozen=True)
class AdapterParams:
    """Low-rank two-matrix module acting on one layer's representations."""

    down: np.ndarray  # (rank, width)
    up: np.ndarray    # (width, rank)

    def __post_init__(self):
        down = np.ascontiguousarray(self.down, dtype=np.float32)
        up = np.ascontiguousarray(self.up, dtype=np.float32)
        if down.ndim != 2 or up.ndim != 2 or down.shape[0] < 1:
            raise SurgeryError("adapter matrices must be 2-D with rank >= 1")
        if up.shape != (down.shape[1], down.shape[0]):
            raise SurgeryError(
                f"adapter shapes inconsistent: down {down.shape}, up {up.shape}"
            )
        down.setflags(write=False)
        up.setflags(write=False)
        object.__setattr__(self, "down", down)
        object.__setattr__(self, "up", up)

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    @property
    def width(self) -> int:
        return self.down.shape[1]


def adapter_forward(adapter: AdapterParams, z: np.ndarray) -> np.ndarray:
    """up @ relu(down @ z) for a (width, batch) matrix."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] != adapter.width:
        raise SurgeryError(f"input must be ({adapter.width}, batch), got {z.shape}")
    hidden = np.maximum(adapter.down.astype(np.float64) @ z, 0.0)
    return adapter.up.astype(np.float64) @ hidden


@dataclass(frozen=True)
class SurgeryMode:
    """Which layers of the backbone receive adapters."""

    kind: str
    block: int | None = None

    def __post_init__(self):
        if self.kind not in (_LAST_LAYER, _ALL_LAYERS, _SINGLE_BLOCK):
            raise SurgeryError(f"unknown surgery mode {self.kind!r}")
        if self.kind == _SINGLE_BLOCK:
            if self.block is None or self.block < 1:
                raise SurgeryError("single-block mode needs a 1-based block index")
        elif self.block is not None:
            raise SurgeryError(f"{self.kind} mode takes no block index")

    def layer_indices(self, num_layers: int) -> tuple[int, ...]:
        if self.kind == _ALL_LAYERS:
            return tuple(range(1, num_layers + 1))
        if self.kind == _LAST_LAYER:
            return (num_layers,)
        if self.block > num_layers:
            raise SurgeryError(f"block {self.block} exceeds {num_layers} layers")
        return (self.block,)

    def label(self) -> str:
        if self.kind == _LAST_LAYER:
            return "v1"
        if self.kind == _ALL_LAYERS:
            return "v2"
        return f"block:{self.block}"

    @classmethod
    def parse(cls, text: str) -> "SurgeryMode":
        if text == "v1":
            return LAST_LAYER
        if text == "v2":
            return ALL_LAYERS
        if text.startswith("block:"):
            try:
                return cls(_SINGLE_BLOCK, int(text.split(":", 1)[1]))
            except ValueError as exc:
                raise SurgeryError(f"bad block index in {text!r}") from exc
        raise SurgeryError(f"unknown surgery mode {text!r} (expected v1, v2, block:<l>)")


LAST_LAYER = SurgeryMode(_LAST_LAYER)
ALL_LAYERS = SurgeryMode(_ALL_LAYERS)


def single_block(block: int) -> SurgeryMode:
    return SurgeryMode(_SINGLE_BLOCK, block)


@dataclass(frozen=True)
class SurgeryStack:
    """Adapters keyed by (task, layer) plus the mode/loss they were built for.

    A task with no entries at all passes through uncorrected; a task with
    partial coverage of the mode's layers is an error at use time.
    """

    mode: SurgeryMode
    psi: LossKind
    adapters: Mapping[tuple[int, int], AdapterParams] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "adapters", dict(self.adapters))

    def tasks(self) -> tuple[int, ...]:
        return tuple(sorted({task for task, _ in self.adapters}))

    def layers_for_task(self, task: int, num_layers: int) -> dict[int, AdapterParams]:
        present = {
            layer: adapter
            for (t, layer), adapter in self.adapters.items()
            if t == task
        }
        if not present:
            return {}
        required = set(self.mode.layer_indices(num_layers))
        if set(present) != required:
            raise SurgeryError(
                f"task {task} covers layers {sorted(present)}, mode requires {sorted(required)}"
            )
        return present

    def validate(self, spec: ModelSpec, num_tasks: int) -> None:
        required = self.mode.layer_indices(spec.num_layers)
        for task in range(num_tasks):
            layers = self.layers_for_task(task, spec.num_layers)
            if set(layers) != set(required):
                raise SurgeryError(f"task {task} is missing adapters for {required}")
            for layer, adapter in layers.items():
                if adapter.width != spec.out_dim(layer):
                    raise SurgeryError(
                        f"adapter ({task},{layer}) width {adapter.width} != layer "
                        f"width {spec.out_dim(layer)}"
                    )

    def to_paramset(self) -> ParamSet:
        entries = []
        for task, layer in sorted(self.adapters):
            adapter = self.adapters[(task, layer)]
            entries.append((f"surgery.{task}.{layer}.down", adapter.down))
            entries.append((f"surgery.{task}.{layer}.up", adapter.up))
        return ParamSet(entries)

    @classmethod
    def from_paramset(
        cls, params: Mapping[str, np.ndarray], num_layers: int, psi: LossKind = LossKind.L1
    ) -> "SurgeryStack":
        halves: dict[tuple[int, int], dict[str, np.ndarray]] = {}
        for name, value in params.items():
            parts = name.split(".")
            if len(parts) != 4 or parts[0] != "surgery" or parts[3] not in ("down", "up"):
                raise SurgeryError(f"unexpected stack entry {name!r}")
            key = (int(parts[1]), int(parts[2]))
            halves.setdefault(key, {})[parts[3]] = value
        adapters = {}
        for key, pair in halves.items():
            if set(pair) != {"down", "up"}:
                raise SurgeryError(f"incomplete adapter for (task, layer) {key}")
            adapters[key] = AdapterParams(down=pair["down"], up=pair["up"])
        coverages = {tuple(sorted(l for t, l in adapters if t == task)) for task in {t for t, _ in adapters}}
        if len(coverages) > 1:
            raise SurgeryError("tasks cover different layer sets")
        coverage = coverages.pop() if coverages else ()
        if coverage == tuple(range(1, num_layers + 1)):
            mode = ALL_LAYERS
        elif coverage == (num_layers,):
            mode = LAST_LAYER
        elif len(coverage) == 1:
            mode = single_block(coverage[0])
        else:
            raise SurgeryError(f"layer coverage {coverage} matches no mode")
        return cls(mode=mode, psi=psi, adapters=adapters)


def init_stack(
    spec: ModelSpec,
    num_tasks: int,
    mode: SurgeryMode,
    rank: int,
    seed: int,
    psi: LossKind = LossKind.L1,
) -> SurgeryStack:
    """Fresh stack: small uniform down-projections, zero up-projections.

    With a zero up matrix every correction starts as the identity, so the
    corrected model begins exactly at the merged model.
    """
    if rank < 1:
        raise SurgeryError("rank must be >= 1")
    adapters = {}
    for task in range(num_tasks):
        for layer in mode.layer_indices(spec.num_layers):
            width = spec.out_dim(layer)
            rng = np.random.default_rng([seed, 5, task, layer])
            bound = 1.0 / math.sqrt(width)
            adapters[(task, layer)] = AdapterParams(
                down=rng.uniform(-bound, bound, size=(rank, width)),
                up=np.zeros((width, rank)),
            )
    return SurgeryStack(mode=mode, psi=psi, adapters=adapters)


def _corrected_layers(
    backbone64: Mapping[str, np.ndarray],
    spec: ModelSpec,
    adapters64: Mapping[int, dict[str, np.ndarray]],
    x: np.ndarray,
):
    """Forward pass applying in-path corrections; returns per-layer records
    (raw post-block value, adapter hidden or None, corrected value)."""
    z = np.asarray(x, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] != spec.input_dim:
        raise SurgeryError(f"input must be ({spec.input_dim}, batch), got {z.shape}")
    records = []
    num = spec.num_layers
    for layer in range(1, num + 1):
        w = backbone64[block_name(layer, "weight")]
        b = backbone64[block_name(layer, "bias")]
        pre = w @ z + b[:, None]
        raw = np.maximum(pre, 0.0) if layer < num else pre
        pair = adapters64.get(layer)
        if pair is None:
            hidden = None
            corrected = raw
        else:
            hidden = np.maximum(pair["down"] @ raw, 0.0)
            corrected = raw - pair["up"] @ hidden
        records.append((raw, hidden, corrected))
        z = corrected
    return records


def corrected_forward(
    merged: Mapping[str, np.ndarray],
    spec: ModelSpec,
    stack: SurgeryStack,
    x: np.ndarray,
    task: int,
) -> RepTrace:
    """Trace of the merged model with task ``task``'s corrections applied.

    With no adapters for the task this equals the plain forward trace
    bitwise; the head should consume the final entry.
    """
    spec.validate_backbone(merged)
    layers = stack.layers_for_task(task, spec.num_layers)
    adapters64 = {
        layer: {
            "down": adapter.down.astype(np.float64),
            "up": adapter.up.astype(np.float64),
        }
        for layer, adapter in layers.items()
    }
    for layer, adapter in layers.items():
        if adapter.width != spec.out_dim(layer):
            raise SurgeryError(
                f"adapter at layer {layer} has width {adapter.width}, "
                f"layer is {spec.out_dim(layer)}"
            )
    records = _corrected_layers(to_float64(merged), spec, adapters64, x)
    return RepTrace([corrected for _, _, corrected in records])


class BatchSource:
    """Iterable of per-iteration batch lists: entry t is a (input_dim, B)
    matrix of unlabeled inputs for task t, or None when task t is done."""

    num_tasks: int

    def __iter__(self):
        raise NotImplementedError


def _check_pools(inputs_per_task) -> list[np.ndarray]:
    pools = [np.asarray(p, dtype=np.float64) for p in inputs_per_task]
    if not pools or any(p.ndim != 2 or p.shape[0] < 1 for p in pools):
        raise SurgeryError("need non-empty (samples, dim) input pools per task")
    return pools


class RandomBatches(BatchSource):
    """Seeded with-replacement batches, the default training regime."""

    def __init__(self, inputs_per_task, batch_size: int, iterations: int, seed):
        self._pools = _check_pools(inputs_per_task)
        if batch_size < 1 or iterations < 1:
            raise SurgeryError("batch_size and iterations must be >= 1")
        self._batch_size = batch_size
        self.iterations = iterations
        self._seed = seed
        self.num_tasks = len(self._pools)

    def __iter__(self):
        rng = np.random.default_rng(self._seed)
        for _ in range(self.iterations):
            batches = []
            for pool in self._pools:
                idx = rng.integers(0, pool.shape[0], size=self._batch_size)
                batches.append(pool[idx].T)
            yield batches


class SequentialBatches(BatchSource):
    """Single ordered pass over the first ceil(fraction * N) samples per task."""

    def __init__(self, inputs_per_task, batch_size: int, fraction: float = 1.0):
        if not 0 < fraction <= 1:
            raise SurgeryError("fraction must lie in (0, 1]")
        if batch_size < 1:
            raise SurgeryError("batch_size must be >= 1")
        self._pools = _check_pools(inputs_per_task)
        self._batch_size = batch_size
        self._takes = [math.ceil(fraction * p.shape[0]) for p in self._pools]
        self.iterations = max(math.ceil(take / batch_size) for take in self._takes)
        self.num_tasks = len(self._pools)

    def __iter__(self):
        for i in range(self.iterations):
            batches = []
            for pool, take in zip(self._pools, self._takes):
                start = i * self._batch_size
                stop = min(start + self._batch_size, take)
                batches.append(pool[start:stop].T if start < take else None)
            yield batches


@dataclass(frozen=True)
class SurgeryResult:
    stack: SurgeryStack
    losses: tuple[float, ...] = field(repr=False)


def surgery_gradients(
    merged64: Mapping[str, np.ndarray],
    spec: ModelSpec,
    task_adapters: Mapping[int, dict[str, np.ndarray]],
    x: np.ndarray,
    targets: list[np.ndarray],
    psi: LossKind,
    full_backprop: bool = False,
):
    """Per-layer alignment losses and adapter gradients for one batch.

    Block-coordinate mode differentiates each layer's loss with its
    incoming representation held fixed; full backprop differentiates the
    summed loss through downstream blocks and corrections too.  Returns
    ``(losses, grads)`` keyed by 1-based layer index, with grads mapping
    to ``{"down": ..., "up": ...}``.
    """
    records = _corrected_layers(merged64, spec, task_adapters, x)
    layer_set = sorted(task_adapters)
    losses: dict[int, float] = {}
    grads: dict[int, dict[str, np.ndarray]] = {}
    if not full_backprop:
        for layer in layer_set:
            raw, hidden, corrected = records[layer - 1]
            loss, g = alignment_loss_and_grad(corrected, targets[layer - 1], psi)
            losses[layer] = loss
            d_omega = -g
            pair = task_adapters[layer]
            d_hidden = (pair["up"].T @ d_omega) * (hidden > 0)
            grads[layer] = {"down": d_hidden @ raw.T, "up": d_omega @ hidden.T}
        return losses, grads

    layer_adjoints: dict[int, np.ndarray] = {}
    for layer in layer_set:
        _, _, corrected = records[layer - 1]
        loss, g = alignment_loss_and_grad(corrected, targets[layer - 1], psi)
        losses[layer] = loss
        layer_adjoints[layer] = g
    carry = None  # dTotal/dZhat_l arriving from block l+1
    for layer in range(spec.num_layers, 0, -1):
        raw, hidden, _ = records[layer - 1]
        a_hat = layer_adjoints.get(layer)
        if carry is not None:
            a_hat = carry if a_hat is None else a_hat + carry
        if a_hat is None:
            carry = None
            continue
        pair = task_adapters.get(layer)
        if pair is None:
            d_raw = a_hat
        else:
            d_omega = -a_hat
            d_hidden = (pair["up"].T @ d_omega) * (hidden > 0)
            grads[layer] = {"down": d_hidden @ raw.T, "up": d_omega @ hidden.T}
            d_raw = a_hat - pair["down"].T @ ((pair["up"].T @ a_hat) * (hidden > 0))
        if layer > 1:
            d_pre = d_raw * (raw > 0) if layer < spec.num_layers else d_raw
            carry = merged64[block_name(layer, "weight")].T @ d_pre
        else:
            carry = None
    return losses, grads


def train_surgery(
    merged: Mapping[str, np.ndarray],
    experts: Sequence[Mapping[str, np.ndarray]],
    spec: ModelSpec,
    data,
    mode: SurgeryMode,
    psi: LossKind,
    cfg: TrainConfig,
    rank: int = 16,
    full_backprop: bool = False,
) -> SurgeryResult:
    """Fit one adapter stack against the experts' representations.

    ``data`` is a :class:`BatchSource`, or a sequence of per-task
    (samples, input_dim) feature matrices that will be sampled with the
    config's batch size, iteration count, and seed.  Labels are never
    read.  By default each adapter descends the gradient of its own
    layer's loss with the incoming representation held fixed
    (block-coordinate); ``full_backprop`` differentiates the summed loss
    through downstream blocks as well.  Neither the merged nor the expert
    parameters are modified.
    """
    if not isinstance(data, BatchSource):
        data = RandomBatches(data, cfg.batch_size, cfg.iterations, [cfg.seed, 6])
    num_tasks = len(experts)
    if data.num_tasks != num_tasks:
        raise SurgeryError(f"data source covers {data.num_tasks} tasks, experts {num_tasks}")
    spec.validate_backbone(merged)
    for expert in experts:
        spec.validate_backbone(expert)

    merged64 = to_float64(merged)
    experts64 = [to_float64(e) for e in experts]
    layer_set = mode.layer_indices(spec.num_layers)
    stack0 = init_stack(spec, num_tasks, mode, rank, cfg.seed, psi)
    adapters64 = {
        key: {
            "down": adapter.down.astype(np.float64),
            "up": adapter.up.astype(np.float64),
        }
        for key, adapter in stack0.adapters.items()
    }
    optimizers = {key: cfg.make_adam() for key in adapters64}

    losses = []
    for iteration, batches in enumerate(data, start=1):
        total = 0.0
        for task, x in enumerate(batches):
            if x is None:
                continue
            targets = forward_layers(experts64[task], spec, x)
            task_adapters = {layer: adapters64[(task, layer)] for layer in layer_set}
            layer_losses, grads = surgery_gradients(
                merged64, spec, task_adapters, x, targets, psi, full_backprop
            )
            for layer, loss in layer_losses.items():
                if not np.isfinite(loss):
                    raise SurgeryError(
                        f"non-finite loss at iteration {iteration}, "
                        f"task {task}, layer {layer}"
                    )
                total += loss
            for layer, grad in grads.items():
                optimizers[(task, layer)].step(adapters64[(task, layer)], grad)
        losses.append(total)

    adapters = {
        key: AdapterParams(down=pair["down"], up=pair["up"])
        for key, pair in adapters64.items()
    }
    stack = SurgeryStack(mode=mode, psi=psi, adapters=adapters)
    return SurgeryResult(stack=stack, losses=tuple(losses))


def stream_train_surgery(
    merged: Mapping[str, np.ndarray],
    experts: Sequence[Mapping[str, np.ndarray]],
    spec: ModelSpec,
    inputs_per_task,
    fraction: float,
    mode: SurgeryMode,
    psi: LossKind,
    cfg: TrainConfig,
    rank: int = 16,
    full_backprop: bool = False,
) -> SurgeryResult:
    """Online variant: one ordered pass over the first ceil(fraction * N)
    samples of each task's pool, each sample visible exactly once."""
    source = SequentialBatches(inputs_per_task, cfg.batch_size, fraction)
    return train_surgery(
        merged, experts, spec, source, mode, psi, cfg, rank=rank, full_backprop=full_backprop
    )
