"""Model merging with representation surgery, at desk scale.

Train small expert MLPs from a shared pretrained backbone, merge them
with weight averaging / task arithmetic / ties / layer-wise adaptive
coefficients, quantify the per-layer representation bias of the merged
model against each expert, and close that bias with task-private
low-rank adapter stacks trained on unlabeled inputs.
"""

from .bias import (
    BiasReport,
    LossKind,
    alignment_loss_and_grad,
    layerwise_bias_report,
    pca_project,
    representation_bias,
)
from .checkpoint import (
    BadMagicError,
    CheckpointError,
    HeaderError,
    NonFiniteError,
    TruncatedError,
    load_paramset,
    save_paramset,
)
from .config import RunConfig, worker_count
from .datasets import Dataset, TaskSuite, gen_task_suite, load_csv, save_csv
from .evaluation import EvalResult, collect_heads, emit_report, evaluate
from .merging import (
    AdaMergeResult,
    MergeRecipe,
    ada_merge,
    grid_search_scale,
    layerwise_merge,
    task_arithmetic,
    task_vector,
    ties_merge,
    weight_average,
)
from .network import (
    Adam,
    ModelSpec,
    RepTrace,
    TrainConfig,
    TrainResult,
    backprop_grads,
    forward_with_trace,
    head_logits,
    pretrain,
    softmax_entropy,
    train_expert,
)
from .surgery import (
    ALL_LAYERS,
    LAST_LAYER,
    AdapterParams,
    SurgeryMode,
    SurgeryResult,
    SurgeryStack,
    adapter_forward,
    corrected_forward,
    init_stack,
    single_block,
    stream_train_surgery,
    train_surgery,
)
from .tensors import ParamSet, bitwise_equal, l1_mean_distance, shape_compatible

__version__ = "0.1.0"
