"""Momentum teacher: EMA parameter tracking, soft codes, agreement loss.

The teacher is a gradient-free copy of the student's image encoder and
encoding head. Its parameters follow the student by exponential moving
average; its outputs are categorical distributions over a K-dimensional
encoding space, shared between the CLS slot and patch slots so that
semantics learned globally transfer to local patch codes.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch

from .config import ModelConfig
from .model import EncodingHead, FeatureSequence, ImageBatch, ImageEncoder, PretrainModel

ParameterSnapshot = dict[str, torch.Tensor]


@dataclass
class CategoricalCode:
    """Points on the K-simplex: (batch, slots, K) probabilities."""

    probs: torch.Tensor

    @property
    def num_codes(self) -> int:
        return self.probs.shape[-1]

    def validate(self) -> None:
        if self.probs.ndim != 3:
            raise ValueError(f"codes must be (batch, slots, K), got {tuple(self.probs.shape)}")
        if (self.probs <= 0).any():
            raise ValueError("code entries must be strictly positive")
        sums = self.probs.sum(dim=-1)
        if (sums - 1.0).abs().max() > 1e-5:
            raise ValueError("each code must sum to 1 within 1e-5")


@dataclass
class TeacherState:
    """EMA copies of the image encoder and encoding head, plus the logit center."""

    encoder: ImageEncoder
    head: EncodingHead
    center: torch.Tensor  # (K,) running mean of teacher logits

    @classmethod
    def from_student(cls, model: PretrainModel) -> "TeacherState":
        encoder = copy.deepcopy(model.image_encoder)
        head = copy.deepcopy(model.encoding_head)
        for p in encoder.parameters():
            p.requires_grad_(False)
        for p in head.parameters():
            p.requires_grad_(False)
        center = torch.zeros(model.cfg.code_dim)
        return cls(encoder=encoder, head=head, center=center)

    def snapshot(self) -> ParameterSnapshot:
        return _named_params(self.encoder, self.head)

    def state_dict(self) -> dict:
        return {
            "encoder": self.encoder.state_dict(),
            "head": self.head.state_dict(),
            "center": self.center,
        }

    def load_state_dict(self, state: dict) -> None:
        self.encoder.load_state_dict(state["encoder"])
        self.head.load_state_dict(state["head"])
        self.center = state["center"].clone()


def _named_params(encoder, head) -> ParameterSnapshot:
    out = {}
    for name, p in encoder.named_parameters():
        out[f"image_encoder.{name}"] = p
    for name, p in head.named_parameters():
        out[f"encoding_head.{name}"] = p
    return out


def student_snapshot(model: PretrainModel) -> ParameterSnapshot:
    """The student parameters tracked by the teacher (image encoder + head)."""
    return _named_params(model.image_encoder, model.encoding_head)


@torch.no_grad()
def ema_update(teacher: TeacherState, student: ParameterSnapshot, m: float) -> TeacherState:
    """teacher <- m * teacher + (1 - m) * student, elementwise; center untouched."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {m}")
    targets = teacher.snapshot()
    if targets.keys() != student.keys():
        raise ValueError(
            "snapshot name mismatch: "
            f"{sorted(set(targets) ^ set(student))}"
        )
    for name, t in targets.items():
        s = student[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        t.mul_(m).add_(s, alpha=1.0 - m)
    return teacher


def codes_from_logits(
    logits: torch.Tensor,
    temperature: float,
    center: torch.Tensor | None = None,
) -> CategoricalCode:
    """Softmax of (optionally centered) logits at the given temperature.

    Entries are clamped to the smallest positive float of the working dtype:
    softmax is strictly positive mathematically, and the clamp keeps that
    invariant when sharp temperatures underflow float32.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if center is not None:
        logits = logits - center
    probs = torch.softmax(logits / temperature, dim=-1)
    return CategoricalCode(probs.clamp_min(torch.finfo(probs.dtype).tiny))


def head_forward(
    head: EncodingHead,
    features: FeatureSequence,
    temperature: float,
    center: torch.Tensor | None = None,
) -> CategoricalCode:
    """Map features to codes on the K-simplex (centering is teacher-side only)."""
    return codes_from_logits(head(features.values), temperature, center)


def cross_entropy_codes(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    """Per-slot CE -sum_k teacher_k * log(student_k); teacher carries no gradient."""
    tiny = torch.finfo(student.dtype).tiny
    return -(teacher.detach() * student.clamp_min(tiny).log()).sum(dim=-1)


def agreement_loss(student_cls: CategoricalCode, teacher_cls: CategoricalCode) -> torch.Tensor:
    """Batch-mean cross entropy of student CLS codes against teacher CLS targets."""
    student_cls.validate()
    teacher_cls.validate()
    if student_cls.probs.shape != teacher_cls.probs.shape:
        raise ValueError(
            f"code shape mismatch: {tuple(student_cls.probs.shape)} vs "
            f"{tuple(teacher_cls.probs.shape)}"
        )
    return cross_entropy_codes(student_cls.probs, teacher_cls.probs).mean()


@dataclass
class TeacherTargets:
    """Outputs of the dual teacher pass; all tensors are gradient-free."""

    cls_code: CategoricalCode    # (B, 1, K), from the text-free pass
    patch_code: CategoricalCode  # (B, N, K), from the text-injected pass
    logits: torch.Tensor         # (B, 1+N, K) raw head logits for center updates


@torch.no_grad()
def teacher_forward_dual(
    view2: ImageBatch,
    text: FeatureSequence | None,
    teacher: TeacherState,
    cfg: ModelConfig,
    text_valid: torch.Tensor | None = None,
) -> TeacherTargets:
    """Infer twice over the final encoder layers: text-free and text-injected.

    The text-free pass yields the CLS target (so no textual information leaks
    into the agreement bootstrap); the re-run of the layers from
    ``inject_start_layer`` with text appended yields the patch targets. Both
    passes share the momentum head. With ``text=None`` or target injection
    disabled, patch targets come from the text-free pass.
    """
    inject = text if cfg.inject_text_targets else None
    plain, injected = teacher.encoder.forward_dual(view2, inject, text_valid=text_valid)
    logits_plain = teacher.head(plain.values)
    if injected is plain:
        logits_injected = logits_plain
    else:
        logits_injected = teacher.head(injected.values)
    center = teacher.center if cfg.use_teacher_centering else None
    cls_code = codes_from_logits(logits_plain[:, :1], cfg.teacher_temp, center)
    patch_code = codes_from_logits(logits_injected[:, 1:], cfg.teacher_temp, center)
    logits = torch.cat([logits_plain[:, :1], logits_injected[:, 1:]], dim=1)
    return TeacherTargets(cls_code=cls_code, patch_code=patch_code, logits=logits)


@torch.no_grad()
def update_center(
    teacher: TeacherState,
    batch_teacher_logits: torch.Tensor,
    center_momentum: float,
) -> TeacherState:
    """center <- cm * center + (1 - cm) * batch mean of teacher logits."""
    if not torch.isfinite(batch_teacher_logits).all():
        raise ValueError("teacher logits must be finite")
    k = teacher.center.shape[0]
    batch_mean = batch_teacher_logits.reshape(-1, k).mean(dim=0)
    teacher.center = center_momentum * teacher.center + (1.0 - center_momentum) * batch_mean
    return teacher
