"""One masked-image-modeling step: masking, masked student pass, dual teacher
pass, agreement and patch-reconstruction losses.

Besides the soft-code supervision, two deliberately weak baselines are
provided for ablation: raw-pixel regression and a fixed color-quantizer
target. Neither is a first-class training path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .config import ModelConfig
from .distill import (
    CategoricalCode,
    TeacherState,
    agreement_loss,
    cross_entropy_codes,
    head_forward,
    teacher_forward_dual,
)
from .masking import (
    PatchMask,
    patch_text_similarity,
    sample_mask_batch,
    sampling_probabilities,
)
from .model import FeatureSequence, ImageBatch, PretrainModel, TokenBatch

logger = logging.getLogger(__name__)


@dataclass
class ViewPair:
    """Two augmented views of the same image batch."""

    view1: ImageBatch
    view2: ImageBatch

    def validate(self) -> None:
        if self.view1.pixels.shape != self.view2.pixels.shape:
            raise ValueError("the two views must have identical shapes")


@dataclass
class MimResult:
    loss_cls: torch.Tensor
    loss_patch: torch.Tensor
    masks: list[PatchMask]
    patch_ce: torch.Tensor       # (B, M) per-masked-patch loss values
    teacher_logits: torch.Tensor  # (B, 1+N, K), for the center update


def _mask_indices(masks: Sequence[PatchMask], device) -> torch.Tensor:
    counts = {m.num_masked for m in masks}
    if len(counts) != 1:
        raise ValueError(f"masks must share one masked count, got {sorted(counts)}")
    if counts == {0}:
        raise ValueError("masks must select at least one patch")
    return torch.stack([m.index_tensor(device) for m in masks])


def mim_loss(
    student_patch_codes: CategoricalCode,
    teacher_patch_codes: CategoricalCode,
    masks: "PatchMask | Sequence[PatchMask]",
) -> torch.Tensor:
    """Mean over masked slots of CE(student code, teacher code), batch-averaged."""
    if isinstance(masks, PatchMask):
        masks = [masks]
    student_patch_codes.validate()
    teacher_patch_codes.validate()
    s, t = student_patch_codes.probs, teacher_patch_codes.probs
    if s.shape != t.shape:
        raise ValueError(f"code shape mismatch: {tuple(s.shape)} vs {tuple(t.shape)}")
    if len(masks) != s.shape[0]:
        raise ValueError(f"got {len(masks)} masks for batch of {s.shape[0]}")
    idx = _mask_indices(masks, s.device) - 1  # patch axis is 0-based
    ce = cross_entropy_codes(s, t)  # (B, N)
    per_patch = ce.gather(1, idx)   # (B, M)
    return per_patch.mean()


def select_masks(
    view2: ImageBatch,
    text_feats: FeatureSequence,
    model: PretrainModel,
    cfg: ModelConfig,
    rng: torch.Generator,
) -> tuple[list[PatchMask], torch.Tensor]:
    """Choose masked patches for each image; returns (masks, similarity).

    Text-guided selection scores each patch of a preliminary text-free
    student pass against the text CLS feature and samples proportionally to
    the softmax of those scores. Selection is a sampling decision, so no
    gradient flows through it.
    """
    with torch.no_grad():
        if cfg.masking == "random":
            b = view2.pixels.shape[0]
            n = cfg.num_patches
            sim = torch.zeros(b, n)
            probs = torch.full((b, n), 1.0 / n)
        else:
            prelim = model.encode_image(view2)
            sim = patch_text_similarity(prelim.tokens, text_feats.cls)
            probs = sampling_probabilities(sim)
        masks = sample_mask_batch(probs, cfg.mask_ratio, rng)
    return masks, sim


def pixel_regression_loss(
    patch_feats: torch.Tensor,
    view2: ImageBatch,
    masks: Sequence[PatchMask],
    model: PretrainModel,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Raw-pixel MIM baseline: MSE between predicted and true masked patches."""
    target = model.image_encoder.flatten_patches(view2.pixels)
    pred = model.pixel_head(patch_feats)
    idx = _mask_indices(masks, pred.device) - 1
    per_patch = ((pred - target) ** 2).mean(dim=-1).gather(1, idx)
    return per_patch.mean(), per_patch


def quantize_patches(view: ImageBatch, cfg: ModelConfig) -> torch.Tensor:
    """Trivial tokenizer stand-in: bin each patch's mean RGB into fixed levels.

    Returns (B, N) code ids in [0, levels**3); purely a function of pixels.
    """
    levels = cfg.quantizer_levels
    p = cfg.patch_size
    b, c, h, w = view.pixels.shape
    g = h // p
    x = view.pixels.reshape(b, c, g, p, g, p).mean(dim=(3, 5))  # (B, 3, g, g)
    bins = (x * levels).long().clamp(0, levels - 1)
    ids = bins[:, 0] * levels * levels + bins[:, 1] * levels + bins[:, 2]
    return ids.reshape(b, g * g)


def quantizer_ce_loss(
    patch_feats: torch.Tensor,
    view2: ImageBatch,
    masks: Sequence[PatchMask],
    model: PretrainModel,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Discrete-code MIM baseline: CE against the color-quantizer ids."""
    target = quantize_patches(view2, model.cfg)
    logits = model.quantizer_head(patch_feats)
    idx = _mask_indices(masks, logits.device) - 1
    ce = F.cross_entropy(logits.transpose(1, 2), target, reduction="none")
    per_patch = ce.gather(1, idx)
    return per_patch.mean(), per_patch


def mim_step(
    views: ViewPair,
    tokens: TokenBatch,
    model: PretrainModel,
    teacher: TeacherState,
    cfg: ModelConfig,
    rng: torch.Generator,
    text_feats: FeatureSequence | None = None,
    view1_feats: FeatureSequence | None = None,
) -> MimResult:
    """Run one full MIM step and return both distillation losses.

    Pipeline: encode text; dual teacher pass on view 2 (CLS target text-free,
    patch targets text-injected); text-guided mask selection; masked student
    pass on view 2 with text injection; agreement loss between the view-1
    student CLS code and the teacher CLS target; masked-patch loss between
    student and teacher patch codes.
    """
    views.validate()
    if text_feats is None:
        text_feats = model.encode_text(tokens)
    text_valid = tokens.attention_mask

    targets = teacher_forward_dual(views.view2, text_feats, teacher, cfg, text_valid=text_valid)

    masks, _ = select_masks(views.view2, text_feats, model, cfg, rng)

    inject = text_feats if cfg.inject_text_mim else None
    masked_feats = model.encode_image(
        views.view2, text=inject, mask=masks,
        text_valid=text_valid if inject is not None else None,
    )

    if view1_feats is None:
        view1_feats = model.encode_image(views.view1)
    student_cls = head_forward(
        model.encoding_head, FeatureSequence(view1_feats.values[:, :1]), cfg.student_temp
    )
    loss_cls = agreement_loss(student_cls, targets.cls_code)

    if cfg.mim_supervision == "codes":
        student_patch = head_forward(
            model.encoding_head, FeatureSequence(masked_feats.values), cfg.student_temp
        )
        student_patch = CategoricalCode(student_patch.probs[:, 1:])
        loss_patch = mim_loss(student_patch, targets.patch_code, masks)
        idx = _mask_indices(masks, loss_patch.device) - 1
        patch_ce = cross_entropy_codes(student_patch.probs, targets.patch_code.probs).gather(1, idx)
    elif cfg.mim_supervision == "pixels":
        loss_patch, patch_ce = pixel_regression_loss(masked_feats.tokens, views.view2, masks, model)
    elif cfg.mim_supervision == "quantizer":
        loss_patch, patch_ce = quantizer_ce_loss(masked_feats.tokens, views.view2, masks, model)
    else:  # "none": Eq.-style total still carries a patch slot, pinned to zero
        loss_patch = torch.zeros((), dtype=loss_cls.dtype)
        patch_ce = torch.zeros(len(masks), masks[0].num_masked)

    return MimResult(
        loss_cls=loss_cls,
        loss_patch=loss_patch,
        masks=masks,
        patch_ce=patch_ce.detach(),
        teacher_logits=targets.logits,
    )
