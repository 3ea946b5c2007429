"""The four merging rules that combine expert backbones into one model.

All merges operate on backbone entries only; task heads are never merged
and are always used per task at evaluation time.  Arithmetic runs in
float64 and is cast to float32 at the end, which keeps the documented
identities exact (mean of identical models, zero-scale task arithmetic,
single-expert ties).
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .network import (
    ModelSpec,
    TrainConfig,
    backbone_adjoint_grads,
    entropy_loss_and_adjoint,
    forward_layers,
    head_name,
    to_paramset,
)
from .tensors import ParamSet, shape_compatible

ALGORITHMS = ("weight_average", "task_arithmetic", "ties_merging", "ada_merging")


class MergeError(ValueError):
    """Incompatible inputs or a diverging merge optimization."""


@dataclass(frozen=True)
class MergeRecipe:
    """Algorithm selector plus the knobs that algorithm needs.

    ``coefficients`` is an output field: ada_merging fills it with the
    optimized (layers, tasks) matrix.
    """

    algorithm: str
    scale: float | None = None
    keep_fraction: float | None = None
    coefficients: np.ndarray | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise MergeError(f"unknown algorithm {self.algorithm!r}")
        if self.algorithm in ("task_arithmetic", "ties_merging") and self.scale is None:
            raise MergeError(f"{self.algorithm} requires a scale")
        if self.algorithm == "ties_merging":
            if self.keep_fraction is None or not 0 < self.keep_fraction <= 1:
                raise MergeError("keep_fraction must lie in (0, 1]")

    def to_text(self) -> str:
        lines = [f"algorithm = {self.algorithm}"]
        if self.scale is not None:
            lines.append(f"scale = {self.scale:.9g}")
        if self.keep_fraction is not None:
            lines.append(f"keep_fraction = {self.keep_fraction:.9g}")
        if self.coefficients is not None:
            coeff = np.asarray(self.coefficients)
            for layer in range(coeff.shape[0]):
                for task in range(coeff.shape[1]):
                    lines.append(f"coeff.{layer + 1}.{task} = {coeff[layer, task]:.9g}")
        return "\n".join(lines) + "\n"


def _backbone_names(params: Mapping[str, np.ndarray]) -> tuple[str, ...]:
    names = tuple(params.backbone().names()) if isinstance(params, ParamSet) else None
    if names is None:
        names = tuple(n for n in params if n.startswith("block"))
    if not names:
        raise MergeError("parameter set has no backbone entries")
    return names


def _check_experts(reference: Mapping[str, np.ndarray], experts: Sequence[Mapping]) -> None:
    if not experts:
        raise MergeError("need at least one expert")
    ref = ParamSet(reference).backbone() if not isinstance(reference, ParamSet) else reference.backbone()
    for i, expert in enumerate(experts):
        exp = ParamSet(expert).backbone() if not isinstance(expert, ParamSet) else expert.backbone()
        if not shape_compatible(ref, exp):
            raise MergeError(f"expert {i} backbone is not shape-compatible")


def task_vector(pretrained: Mapping[str, np.ndarray], expert: Mapping[str, np.ndarray]) -> ParamSet:
    """Backbone delta expert - pretrained."""
    _check_experts(pretrained, [expert])
    names = _backbone_names(pretrained)
    return to_paramset(
        (n, expert[n].astype(np.float64) - pretrained[n].astype(np.float64)) for n in names
    )


def weight_average(experts: Sequence[Mapping[str, np.ndarray]]) -> ParamSet:
    """Elementwise mean of the expert backbones."""
    if not experts:
        raise MergeError("need at least one expert")
    _check_experts(experts[0], experts)
    names = _backbone_names(experts[0])
    out = {}
    for name in names:
        stack = np.stack([np.asarray(e[name], dtype=np.float64) for e in experts])
        out[name] = stack.mean(axis=0)
    return to_paramset(out)


def task_arithmetic(
    pretrained: Mapping[str, np.ndarray],
    experts: Sequence[Mapping[str, np.ndarray]],
    scale: float,
) -> ParamSet:
    """pretrained + scale * sum of task vectors, on backbone entries."""
    _check_experts(pretrained, experts)
    names = _backbone_names(pretrained)
    out = {}
    for name in names:
        base = np.asarray(pretrained[name], dtype=np.float64)
        total = np.zeros_like(base)
        for expert in experts:
            total += np.asarray(expert[name], dtype=np.float64) - base
        out[name] = base + scale * total
    return to_paramset(out)


def grid_search_scale(
    pretrained: Mapping[str, np.ndarray],
    experts: Sequence[ParamSet],
    spec: ModelSpec,
    candidates: Sequence[float],
    val_sets,
) -> float:
    """Candidate scale maximizing mean per-task validation accuracy of the
    merged model with the experts' task heads; ties go to the smaller scale.
    """
    from .evaluation import collect_heads, evaluate

    if not candidates:
        raise MergeError("empty candidate list")
    heads = collect_heads(experts)
    best_scale = None
    best_acc = -1.0
    for scale in candidates:
        merged = task_arithmetic(pretrained, experts, scale)
        result = evaluate(merged, heads, spec, val_sets, model_id=f"ta[{scale}]")
        if result.average > best_acc or (
            result.average == best_acc and scale < best_scale
        ):
            best_acc = result.average
            best_scale = scale
    return float(best_scale)


def _flatten_backbone(params: Mapping[str, np.ndarray], names: Sequence[str]) -> np.ndarray:
    return np.concatenate([np.asarray(params[n], dtype=np.float64).ravel() for n in names])


def _trim_keep_top(vector: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Zero all but the ceil(keep_fraction * n) largest-|value| entries.

    Threshold ties are broken by parameter order: among equal magnitudes
    the earlier entry survives.
    """
    n = vector.size
    k = math.ceil(keep_fraction * n)
    if k >= n:
        return vector.copy()
    order = np.argsort(-np.abs(vector), kind="stable")
    trimmed = np.zeros_like(vector)
    kept = order[:k]
    trimmed[kept] = vector[kept]
    return trimmed


def ties_merge(
    pretrained: Mapping[str, np.ndarray],
    experts: Sequence[Mapping[str, np.ndarray]],
    scale: float,
    keep_fraction: float,
) -> ParamSet:
    """Trim / elect-sign / disjoint-mean merge of task vectors.

    Trim keeps the top ``keep_fraction`` of each task vector by magnitude
    across the whole vector; per coordinate the elected sign is the sign
    of the trimmed sum (zero sum contributes nothing) and only trimmed
    values matching that sign are averaged.
    """
    if not 0 < keep_fraction <= 1:
        raise MergeError("keep_fraction must lie in (0, 1]")
    _check_experts(pretrained, experts)
    names = _backbone_names(pretrained)
    base = _flatten_backbone(pretrained, names)
    trimmed = np.stack(
        [
            _trim_keep_top(_flatten_backbone(e, names) - base, keep_fraction)
            for e in experts
        ]
    )
    elected = np.sign(trimmed.sum(axis=0))
    matches = (np.sign(trimmed) == elected) & (elected != 0)
    counts = matches.sum(axis=0)
    sums = np.where(matches, trimmed, 0.0).sum(axis=0)
    merged_flat = base + scale * np.divide(
        sums, counts, out=np.zeros_like(sums), where=counts > 0
    )
    out = {}
    offset = 0
    for name in names:
        shape = pretrained[name].shape
        count = int(np.prod(shape))
        out[name] = merged_flat[offset : offset + count].reshape(shape)
        offset += count
    return to_paramset(out)


@dataclass(frozen=True)
class AdaMergeResult:
    params: ParamSet
    coefficients: np.ndarray
    entropies: tuple[float, ...]


def _layer_taus(
    pretrained64: Mapping[str, np.ndarray],
    experts: Sequence[Mapping[str, np.ndarray]],
    names: Sequence[str],
) -> list[dict[str, np.ndarray]]:
    return [
        {n: np.asarray(e[n], dtype=np.float64) - pretrained64[n] for n in names}
        for e in experts
    ]


def _merge_from_taus(pretrained64, taus, coefficients, spec: ModelSpec):
    merged = {}
    for layer in range(1, spec.num_layers + 1):
        for kind in ("weight", "bias"):
            name = f"block{layer}.{kind}"
            value = pretrained64[name].copy()
            for task, tau in enumerate(taus):
                value += coefficients[layer - 1, task] * tau[name]
            merged[name] = value
    return merged


def layerwise_merge(
    pretrained: Mapping[str, np.ndarray],
    experts: Sequence[Mapping[str, np.ndarray]],
    coefficients: np.ndarray,
    spec: ModelSpec,
) -> ParamSet:
    """pretrained + per-layer coefficient-weighted task vectors."""
    _check_experts(pretrained, experts)
    coefficients = np.asarray(coefficients, dtype=np.float64)
    if coefficients.shape != (spec.num_layers, len(experts)):
        raise MergeError(
            f"coefficients must be (layers={spec.num_layers}, tasks={len(experts)})"
        )
    names = _backbone_names(pretrained)
    pre64 = {n: np.asarray(pretrained[n], dtype=np.float64) for n in names}
    taus = _layer_taus(pre64, experts, names)
    return to_paramset(_merge_from_taus(pre64, taus, coefficients, spec))


def _entropy_objective_parts(
    merged64,
    experts: Sequence[Mapping[str, np.ndarray]],
    spec: ModelSpec,
    batches: Sequence[np.ndarray],
    want_grads: bool,
):
    num_tasks = len(experts)
    total_entropy = 0.0
    total_grads: dict[str, np.ndarray] | None = {} if want_grads else None
    for task, x in enumerate(batches):
        x64 = np.asarray(x, dtype=np.float64)
        layers = forward_layers(merged64, spec, x64)
        head_w = np.asarray(experts[task][head_name(task, "weight")], dtype=np.float64)
        head_b = np.asarray(experts[task][head_name(task, "bias")], dtype=np.float64)
        logits = head_w @ layers[-1] + head_b[:, None]
        entropy, dlogits = entropy_loss_and_adjoint(logits)
        total_entropy += entropy
        if want_grads:
            adjoint = head_w.T @ dlogits
            for name, grad in backbone_adjoint_grads(
                merged64, spec, x64, layers, adjoint
            ).items():
                if name in total_grads:
                    total_grads[name] += grad / num_tasks
                else:
                    total_grads[name] = grad / num_tasks
    return total_entropy / num_tasks, total_grads


def ada_objective(
    pretrained: Mapping[str, np.ndarray],
    experts: Sequence[Mapping[str, np.ndarray]],
    spec: ModelSpec,
    coefficients: np.ndarray,
    batches: Sequence[np.ndarray],
) -> float:
    """Mean (over tasks) softmax entropy of the coefficient-merged model,
    each task scored through its own head on its own unlabeled batch."""
    _check_experts(pretrained, experts)
    names = _backbone_names(pretrained)
    pre64 = {n: np.asarray(pretrained[n], dtype=np.float64) for n in names}
    taus = _layer_taus(pre64, experts, names)
    merged64 = _merge_from_taus(pre64, taus, np.asarray(coefficients, np.float64), spec)
    loss, _ = _entropy_objective_parts(merged64, experts, spec, batches, want_grads=False)
    return loss


def _ada_loss_and_gradient(pre64, taus, experts, spec, coefficients, batches):
    merged64 = _merge_from_taus(pre64, taus, coefficients, spec)
    loss, grads = _entropy_objective_parts(merged64, experts, spec, batches, want_grads=True)
    coeff_grad = np.zeros_like(coefficients)
    for layer in range(1, spec.num_layers + 1):
        for kind in ("weight", "bias"):
            name = f"block{layer}.{kind}"
            for task, tau in enumerate(taus):
                # Merged weights are linear in the coefficients, so the
                # coefficient gradient is <dLoss/dTheta_l, tau_l>.
                coeff_grad[layer - 1, task] += float(
                    (grads[name] * tau[name]).sum()
                )
    return loss, coeff_grad


def ada_coefficient_gradient(
    pretrained: Mapping[str, np.ndarray],
    experts: Sequence[Mapping[str, np.ndarray]],
    spec: ModelSpec,
    coefficients: np.ndarray,
    batches: Sequence[np.ndarray],
) -> np.ndarray:
    """Analytic gradient of :func:`ada_objective` w.r.t. the coefficients."""
    names = _backbone_names(pretrained)
    pre64 = {n: np.asarray(pretrained[n], dtype=np.float64) for n in names}
    taus = _layer_taus(pre64, experts, names)
    _, grad = _ada_loss_and_gradient(
        pre64, taus, experts, spec, np.asarray(coefficients, np.float64), batches
    )
    return grad


def ada_merge(
    pretrained: Mapping[str, np.ndarray],
    experts: Sequence[ParamSet],
    spec: ModelSpec,
    inputs_per_task: Sequence[np.ndarray],
    cfg: TrainConfig,
    init_coefficient: float = 0.3,
) -> AdaMergeResult:
    """Optimize layer-level merging coefficients by entropy minimization.

    ``inputs_per_task[t]`` is an (N_t, input_dim) matrix of unlabeled
    inputs for task t.  Coefficients start at ``init_coefficient`` and are
    updated by Adam on the mean softmax entropy of the merged model's
    predictions through each task's head.  Batch draws are seeded per
    task position, so results are reproducible for a fixed expert order;
    the closed-form merges are additionally invariant to that order.
    """
    _check_experts(pretrained, experts)
    if len(inputs_per_task) != len(experts):
        raise MergeError("need one unlabeled input pool per expert")
    pools = [np.asarray(p, dtype=np.float64) for p in inputs_per_task]
    if any(p.ndim != 2 or p.shape[0] < 1 for p in pools):
        raise MergeError("unlabeled pools must be non-empty (samples, dim) matrices")

    names = _backbone_names(pretrained)
    pre64 = {n: np.asarray(pretrained[n], dtype=np.float64) for n in names}
    taus = _layer_taus(pre64, experts, names)
    coefficients = np.full((spec.num_layers, len(experts)), float(init_coefficient))

    adam = cfg.make_adam()
    rng = np.random.default_rng([cfg.seed, 4])
    entropies = []
    state = {"coefficients": coefficients}
    for iteration in range(1, cfg.iterations + 1):
        batches = []
        for pool in pools:
            idx = rng.integers(0, pool.shape[0], size=cfg.batch_size)
            batches.append(pool[idx].T)
        loss, grad = _ada_loss_and_gradient(
            pre64, taus, experts, spec, coefficients, batches
        )
        if not np.isfinite(loss):
            raise MergeError(f"non-finite entropy at iteration {iteration}")
        entropies.append(loss)
        adam.step(state, {"coefficients": grad})

    merged = to_paramset(_merge_from_taus(pre64, taus, coefficients, spec))
    return AdaMergeResult(
        params=merged, coefficients=coefficients.copy(), entropies=tuple(entropies)
    )


def merge_with_recipe(
    recipe: MergeRecipe,
    pretrained: Mapping[str, np.ndarray],
    experts: Sequence[ParamSet],
    spec: ModelSpec | None = None,
    inputs_per_task=None,
    cfg: TrainConfig | None = None,
) -> tuple[ParamSet, MergeRecipe]:
    """Dispatch a recipe; returns the merged backbone and the recipe with
    any output fields (ada coefficients) filled in."""
    if recipe.algorithm == "weight_average":
        return weight_average(experts), recipe
    if recipe.algorithm == "task_arithmetic":
        return task_arithmetic(pretrained, experts, recipe.scale), recipe
    if recipe.algorithm == "ties_merging":
        return ties_merge(pretrained, experts, recipe.scale, recipe.keep_fraction), recipe
    if spec is None or inputs_per_task is None or cfg is None:
        raise MergeError("ada_merging needs spec, unlabeled inputs, and a train config")
    result = ada_merge(pretrained, experts, spec, inputs_per_task, cfg)
    filled = MergeRecipe(
        algorithm=recipe.algorithm,
        scale=recipe.scale,
        keep_fraction=recipe.keep_fraction,
        coefficients=result.coefficients,
    )
    return result.params, filled
