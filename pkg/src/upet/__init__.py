"""Joint dementia classification and synthetic PET generation from MRI
volumes, with a self-contained autodiff engine and desk-scale tooling."""

from .tensor import ComputationRecord, Tensor, backward
from .gradcheck import finite_difference_check
from .model import (
    AttentionGateParams,
    AttentionUnavailableError,
    ModelOutputs,
    UPetConfig,
    UPetModel,
    attention_gate,
    build_model,
    export_attention_maps,
)
from .losses import LossBreakdown, combined_loss, cross_entropy, masked_l1
from .metrics import EvalReport, accuracy, auc_ovr, f1_macro, mae_volumes
from .data import (
    SampleRecord,
    SplitSpec,
    Volume,
    center_crop_or_pad,
    read_manifest,
    read_volume,
    subject_level_split,
    write_manifest,
    write_volume,
    zscore_normalize,
)
from .phantom import PhantomConfig, generate_phantom_dataset
from .training import (
    AdamState,
    Checkpoint,
    TrainConfig,
    adam_step,
    evaluate_model,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AttentionGateParams",
    "AttentionUnavailableError",
    "Checkpoint",
    "ComputationRecord",
    "EvalReport",
    "LossBreakdown",
    "ModelOutputs",
    "PhantomConfig",
    "SampleRecord",
    "SplitSpec",
    "Tensor",
    "TrainConfig",
    "UPetConfig",
    "UPetModel",
    "Volume",
    "accuracy",
    "adam_step",
    "attention_gate",
    "auc_ovr",
    "backward",
    "build_model",
    "center_crop_or_pad",
    "combined_loss",
    "cross_entropy",
    "evaluate_model",
    "export_attention_maps",
    "f1_macro",
    "finite_difference_check",
    "generate_phantom_dataset",
    "load_checkpoint",
    "mae_volumes",
    "masked_l1",
    "read_manifest",
    "read_volume",
    "save_checkpoint",
    "subject_level_split",
    "train",
    "write_manifest",
    "write_volume",
    "zscore_normalize",
]
