"""Reusable desk-scale experiment runners shared by tests and scripts."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .config import ModelConfig
from .distill import TeacherState, ema_update, student_snapshot
from .mim import ViewPair, mim_step
from .model import ImageBatch, PretrainModel, TokenBatch, build_model


@dataclass
class TextRecoveryOutcome:
    first_loss: float
    final_loss: float

    @property
    def reduction(self) -> float:
        return 1.0 - self.final_loss / self.first_loss


def text_recovery_config(inject: bool) -> ModelConfig:
    """Small model where every patch is masked, so the student sees only mask
    tokens plus (optionally) the caption."""
    return ModelConfig(
        image_size=16, patch_size=4, embed_dim=32, heads=4, image_layers=3,
        text_layers=2, fusion_layers=1, decoder_layers=1, inject_start_layer=3,
        code_dim=32, head_hidden_dim=64, mask_ratio=0.97, teacher_temp=0.01,
        inject_text_mim=inject, max_text_len=8, vocab_size=32,
    )


def text_recovery_batch(cfg: ModelConfig, per_class: int = 4) -> tuple[ViewPair, TokenBatch]:
    """Two classes whose images differ but are fully destroyed by masking;
    only the caption identifies the class."""
    b = 2 * per_class
    s = cfg.image_size
    pix = torch.empty(b, 3, s, s)
    pix[:per_class] = torch.tensor([0.85, 0.10, 0.10])[None, :, None, None]
    pix[per_class:] = torch.tensor([0.10, 0.15, 0.85])[None, :, None, None]
    ids = torch.zeros(b, 1 + cfg.max_text_len, dtype=torch.long)
    ids[:, 0] = 1
    ids[:per_class, 1:4] = torch.tensor([4, 5, 6])
    ids[per_class:, 1:4] = torch.tensor([7, 8, 9])
    tokens = TokenBatch(ids=ids, lengths=torch.full((b,), 4))
    return ViewPair(ImageBatch(pix), ImageBatch(pix)), tokens


def run_text_recovery(
    inject: bool,
    steps: int = 200,
    seed: int = 9,
    lr: float = 3e-3,
    head_scale: float = 10.0,
) -> TextRecoveryOutcome:
    """Train the masked-patch loss on the text-recoverable construction.

    The teacher is frozen (EMA momentum 1) so its targets stay fixed: they are
    functions of the uncorrupted class image, sharpened by scaling the head so
    the class signal survives the argmax. Without text injection the student's
    inputs are identical across classes, leaving an irreducible loss floor.
    """
    torch.manual_seed(seed)
    cfg = text_recovery_config(inject)
    model = build_model(cfg, seed=seed)
    with torch.no_grad():
        model.encoding_head.fc2.weight.mul_(head_scale)
        model.encoding_head.fc2.bias.mul_(head_scale)
    teacher = TeacherState.from_student(model)
    views, tokens = text_recovery_batch(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    g = torch.Generator().manual_seed(seed)
    first = None
    for _ in range(steps):
        result = mim_step(views, tokens, model, teacher, cfg, g)
        if first is None:
            first = float(result.loss_patch.detach())
        opt.zero_grad()
        result.loss_patch.backward()
        opt.step()
        ema_update(teacher, student_snapshot(model), m=1.0)
    with torch.no_grad():
        final = float(mim_step(views, tokens, model, teacher, cfg, g).loss_patch)
    return TextRecoveryOutcome(first_loss=first, final_loss=final)


def overfit_corpus_config() -> ModelConfig:
    return ModelConfig(
        image_size=16, patch_size=4, embed_dim=32, heads=4, image_layers=2,
        text_layers=2, fusion_layers=1, decoder_layers=2, inject_start_layer=2,
        code_dim=16, head_hidden_dim=32, vocab_size=32, max_text_len=8,
    )


def overfit_plm(
    model: PretrainModel,
    images: ImageBatch,
    tokens: TokenBatch,
    splits: torch.Tensor,
    steps: int = 500,
    lr: float = 3e-3,
    target: float = 0.05,
) -> tuple[float, int]:
    """Minimize the fixed-split PLM loss on a small corpus until it reaches
    ``target`` (or the step budget runs out). Returns (final loss, steps run)."""
    from .objectives import plm_from_splits

    opt = torch.optim.Adam(model.parameters(), lr=lr)
    loss = None
    for step in range(1, steps + 1):
        image_feats = model.encode_image(images)
        loss = plm_from_splits(tokens, splits, image_feats, model)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if float(loss.detach()) < target:
            return float(loss.detach()), step
    return float(loss.detach()), steps
