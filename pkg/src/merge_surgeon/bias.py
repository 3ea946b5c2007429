"""Representation-bias metrics, layer-wise reports, and 2-D projections.

The bias between a merged-model trace and an expert trace is a
dimension- and sample-normalized distance, so values are comparable
across layers of different widths.  All three distance kinds report 0
for perfectly aligned representations.
"""

from __future__ import annotations

import enum
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .network import ModelSpec, forward_with_trace
from .tensors import ParamSet


class BiasError(ValueError):
    """Shape mismatch or degenerate input in a bias computation."""


class LossKind(enum.Enum):
    """Distance used both as alignment training loss and bias metric."""

    L1 = "l1"
    MSE = "mse"
    NEG_COSINE = "cos"

    @classmethod
    def parse(cls, text: str) -> "LossKind":
        for kind in cls:
            if kind.value == text:
                return kind
        raise BiasError(f"unknown loss kind {text!r} (expected l1, mse, or cos)")


def _check_pair(z_a: np.ndarray, z_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(z_a, dtype=np.float64)
    b = np.asarray(z_b, dtype=np.float64)
    if a.shape != b.shape:
        raise BiasError(f"trace shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2 or a.shape[1] < 1:
        raise BiasError("traces must be (dim, samples) with at least one sample")
    return a, b


def _cosine_parts(a: np.ndarray, b: np.ndarray):
    norm_a = np.linalg.norm(a, axis=0)
    norm_b = np.linalg.norm(b, axis=0)
    if (norm_a == 0).any() or (norm_b == 0).any():
        raise BiasError("cosine distance undefined for an all-zero column")
    cos = (a * b).sum(axis=0) / (norm_a * norm_b)
    return cos, norm_a, norm_b


def representation_bias(z_mtl: np.ndarray, z_ind: np.ndarray, kind: LossKind) -> float:
    """Normalized distance between two (dim, samples) representation sets.

    L1 and MSE average over every entry; NEG_COSINE averages (1 - cosine)
    over samples so 0 means aligned for every kind.
    """
    a, b = _check_pair(z_mtl, z_ind)
    diff = a - b
    if kind is LossKind.L1:
        return float(np.abs(diff).mean())
    if kind is LossKind.MSE:
        return float(np.square(diff).mean())
    cos, _, _ = _cosine_parts(a, b)
    return float((1.0 - cos).mean())


def alignment_loss_and_grad(
    z_hat: np.ndarray, z_ind: np.ndarray, kind: LossKind
) -> tuple[float, np.ndarray]:
    """Training objective for surgery plus its gradient w.r.t. ``z_hat``.

    For L1 and MSE the value coincides with :func:`representation_bias`;
    for NEG_COSINE the raw mean negative cosine is optimized (same
    gradient as 1 - cosine, shifted value).
    """
    a, b = _check_pair(z_hat, z_ind)
    count = a.size
    if kind is LossKind.L1:
        diff = a - b
        return float(np.abs(diff).mean()), np.sign(diff) / count
    if kind is LossKind.MSE:
        diff = a - b
        return float(np.square(diff).mean()), 2.0 * diff / count
    cos, norm_a, norm_b = _cosine_parts(a, b)
    samples = a.shape[1]
    grad = -(b / (norm_a * norm_b) - a * (cos / np.square(norm_a))) / samples
    return float(-cos.mean()), grad


@dataclass(frozen=True)
class BiasReport:
    """Per-layer, per-task bias values with the metadata to reproduce them."""

    values: np.ndarray  # (num_layers, num_tasks)
    psi: LossKind
    split: str
    model_id: str

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise BiasError("bias values must be a (layers, tasks) matrix")
        if not np.isfinite(values).all() or (values < 0).any():
            raise BiasError("bias values must be finite and non-negative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def num_layers(self) -> int:
        return self.values.shape[0]

    @property
    def num_tasks(self) -> int:
        return self.values.shape[1]

    def layer_means(self) -> np.ndarray:
        """Across-task mean per layer, the depth-profile curve."""
        return self.values.mean(axis=1)

    def to_csv_text(self) -> str:
        lines = ["task,layer,value"]
        for task in range(self.num_tasks):
            for layer in range(1, self.num_layers + 1):
                lines.append(f"{task},{layer},{self.values[layer - 1, task]:.9g}")
        return "\n".join(lines) + "\n"


def layerwise_bias_report(
    merged: Mapping[str, np.ndarray],
    experts: Sequence[ParamSet],
    spec: ModelSpec,
    inputs_per_task: Sequence[np.ndarray],
    psi: LossKind,
    stack=None,
    split: str = "test",
    model_id: str = "merged",
) -> BiasReport:
    """Bias of the merged model against each expert, per layer and task.

    ``inputs_per_task[t]`` is an (N_t, input_dim) feature matrix.  When a
    surgery ``stack`` is supplied the merged trace is the corrected
    in-path trace, so the report shows post-surgery alignment.
    """
    if len(experts) != len(inputs_per_task):
        raise BiasError("need exactly one input matrix per expert")
    values = np.zeros((spec.num_layers, len(experts)))
    for task, (expert, features) in enumerate(zip(experts, inputs_per_task)):
        x = np.asarray(features, dtype=np.float64).T
        if stack is None:
            merged_trace = forward_with_trace(merged, spec, x)
        else:
            from .surgery import corrected_forward

            merged_trace = corrected_forward(merged, spec, stack, x, task)
        expert_trace = forward_with_trace(expert, spec, x)
        for layer in range(spec.num_layers):
            values[layer, task] = representation_bias(
                merged_trace[layer], expert_trace[layer], psi
            )
    return BiasReport(values=values, psi=psi, split=split, model_id=model_id)


def pca_project(reps: np.ndarray) -> np.ndarray:
    """Project (dim, samples) representations onto their top-2 principal
    directions.

    Columns are centered first; the sign of each direction is fixed by
    making its largest-magnitude loading positive, so output is
    deterministic.
    """
    data = np.asarray(reps, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise BiasError("need a (dim >= 2, samples) matrix")
    if data.shape[1] < 2:
        raise BiasError("need at least two samples")
    centered = data - data.mean(axis=1, keepdims=True)
    # SVD of the centered data: left singular vectors = principal directions.
    u, _, _ = np.linalg.svd(centered, full_matrices=False)
    components = u[:, :2].T
    for i in range(2):
        lead = np.argmax(np.abs(components[i]))
        if components[i, lead] < 0:
            components[i] = -components[i]
    return components @ centered
