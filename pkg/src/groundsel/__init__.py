"""Visual grounding with language-guided token selection, on plain numpy."""

from .autodiff import (
    ComputationRecord,
    ContractViolation,
    NonFiniteValue,
    ShapeMismatch,
    Tensor,
    finite_diff_check,
    record,
)
from .data import VOCAB, DatasetError, DatasetSpec, GroundingExample, generate_dataset, load_dataset, save_dataset
from .flops import cost_breakdown, ratio_table, sequence_schedule
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import (
    ModelConfig,
    ModelParams,
    init_params,
    model_forward,
    predict,
    tiny_config,
    toy_config,
    vitb_config,
)
from .nn import AdamW
from .objectives import BBox, LossWeights, acc_at_05, giou_box, grounding_loss, iou_box
from .selection import SelectionTrace, top_rho_indices
from .train import TrainConfig, TrainResult, evaluate, prepare_examples, train_model

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "BBox",
    "CheckpointError",
    "ComputationRecord",
    "ContractViolation",
    "DatasetError",
    "DatasetSpec",
    "GroundingExample",
    "LossWeights",
    "ModelConfig",
    "ModelParams",
    "NonFiniteValue",
    "SelectionTrace",
    "ShapeMismatch",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "VOCAB",
    "acc_at_05",
    "cost_breakdown",
    "evaluate",
    "finite_diff_check",
    "generate_dataset",
    "giou_box",
    "grounding_loss",
    "init_params",
    "iou_box",
    "load_checkpoint",
    "load_dataset",
    "model_forward",
    "predict",
    "prepare_examples",
    "ratio_table",
    "record",
    "save_checkpoint",
    "save_dataset",
    "sequence_schedule",
    "tiny_config",
    "top_rho_indices",
    "toy_config",
    "train_model",
    "vitb_config",
]
