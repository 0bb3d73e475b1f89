"""Desk-scale vision-language pretraining with momentum self-distillation,
text-guided masking, and text-involved masked image modeling."""

from .config import ModelConfig, config_hash
from .data import (
    DatasetManifest,
    Vocabulary,
    augment_two_views,
    generate_synthetic_corpus,
)
from .distill import (
    CategoricalCode,
    TeacherState,
    agreement_loss,
    ema_update,
    head_forward,
    teacher_forward_dual,
    update_center,
)
from .masking import (
    PatchMask,
    mask_count,
    patch_text_similarity,
    random_mask,
    sample_mask,
    sampling_probabilities,
)
from .mim import MimResult, ViewPair, mim_loss, mim_step
from .model import (
    FeatureSequence,
    ImageBatch,
    PretrainModel,
    TokenBatch,
    build_model,
)
from .objectives import LossBundle, itc_loss, itm_loss, mlm_loss, plm_loss, total_loss
from .train import TrainState, load_checkpoint, pretrain, save_checkpoint, train_step

__all__ = [
    "CategoricalCode",
    "DatasetManifest",
    "FeatureSequence",
    "ImageBatch",
    "LossBundle",
    "MimResult",
    "ModelConfig",
    "PatchMask",
    "PretrainModel",
    "TeacherState",
    "TokenBatch",
    "TrainState",
    "ViewPair",
    "Vocabulary",
    "agreement_loss",
    "augment_two_views",
    "build_model",
    "config_hash",
    "ema_update",
    "generate_synthetic_corpus",
    "head_forward",
    "itc_loss",
    "itm_loss",
    "load_checkpoint",
    "mask_count",
    "mim_loss",
    "mim_step",
    "mlm_loss",
    "patch_text_similarity",
    "plm_loss",
    "pretrain",
    "random_mask",
    "sample_mask",
    "sampling_probabilities",
    "save_checkpoint",
    "teacher_forward_dual",
    "total_loss",
    "train_step",
    "update_center",
]
