"""Auxiliary pre-training objectives and the equal-weight total loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import ModelConfig
from .masking import round_half_up
from .model import (
    MASK_TOKEN_ID,
    NUM_SPECIAL_TOKENS,
    FeatureSequence,
    PretrainModel,
    TokenBatch,
)

logger = logging.getLogger(__name__)

LOSS_NAMES = ("cls", "patch", "itc", "itm", "mlm", "plm")


@dataclass
class LossBundle:
    """The six named scalar losses of one training step plus their sum."""

    cls: torch.Tensor
    patch: torch.Tensor
    itc: torch.Tensor
    itm: torch.Tensor
    mlm: torch.Tensor
    plm: torch.Tensor
    total: torch.Tensor

    def to_floats(self) -> dict[str, float]:
        return {
            name: float(torch.as_tensor(getattr(self, name)).detach())
            for name in LOSS_NAMES + ("total",)
        }


def total_loss(
    cls: torch.Tensor,
    patch: torch.Tensor,
    itc: torch.Tensor,
    itm: torch.Tensor,
    mlm: torch.Tensor,
    plm: torch.Tensor,
) -> LossBundle:
    """Unweighted sum of the six objectives; aborts on any non-finite component."""
    parts = dict(cls=cls, patch=patch, itc=itc, itm=itm, mlm=mlm, plm=plm)
    for name, value in parts.items():
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise FloatingPointError(f"non-finite loss component: {name}={value}")
    return LossBundle(total=cls + patch + itc + itm + mlm + plm, **parts)


def itc_loss(
    image_cls: torch.Tensor,
    text_cls: torch.Tensor,
    temperature: "float | torch.Tensor",
) -> torch.Tensor:
    """Symmetric in-batch InfoNCE on L2-normalized global embeddings."""
    if image_cls.shape != text_cls.shape:
        raise ValueError(
            f"embedding shape mismatch: {tuple(image_cls.shape)} vs {tuple(text_cls.shape)}"
        )
    img = F.normalize(image_cls, dim=-1)
    txt = F.normalize(text_cls, dim=-1)
    logits = img @ txt.t() / temperature
    labels = torch.arange(img.shape[0], device=img.device)
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.t(), labels))


def itc_logits(image_cls: torch.Tensor, text_cls: torch.Tensor) -> torch.Tensor:
    """Cosine-similarity matrix (images x texts) of normalized embeddings."""
    return F.normalize(image_cls, dim=-1) @ F.normalize(text_cls, dim=-1).t()


def mine_hard_negatives(
    similarity: torch.Tensor,
    rng: torch.Generator,
    hard: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample one negative text per image and one negative image per text.

    ``similarity`` is the (B, B) image-text score matrix. Hard mining samples
    proportionally to softmax similarity with the diagonal excluded; the
    fallback samples uniformly off-diagonal. The true pair index is never
    drawn.
    """
    b = similarity.shape[0]
    if similarity.shape != (b, b) or b < 2:
        raise ValueError("negative mining needs a square similarity matrix with batch >= 2")
    eye = torch.eye(b, dtype=torch.bool, device=similarity.device)
    if hard:
        weights = similarity.float().masked_fill(eye, float("-inf")).softmax(dim=-1)
    else:
        weights = (~eye).float()
    neg_text = torch.multinomial(weights, 1, generator=rng).squeeze(1)
    neg_image = torch.multinomial(weights.t().contiguous(), 1, generator=rng).squeeze(1)
    return neg_text, neg_image


def itm_loss(fused_cls: torch.Tensor, labels: torch.Tensor, head: torch.nn.Module) -> torch.Tensor:
    """Binary cross entropy of the match head applied to fused CLS features."""
    logits = head(fused_cls).squeeze(-1)
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))


def itm_with_negatives(
    model: PretrainModel,
    image_feats: FeatureSequence,
    text_feats: FeatureSequence,
    text_valid: torch.Tensor,
    neg_text: torch.Tensor,
    neg_image: torch.Tensor,
) -> torch.Tensor:
    """ITM loss for fixed negative assignments (the deterministic half)."""
    img_values = torch.cat(
        [image_feats.values, image_feats.values, image_feats.values[neg_image]]
    )
    txt_values = torch.cat(
        [text_feats.values, text_feats.values[neg_text], text_feats.values]
    )
    txt_valid = torch.cat([text_valid, text_valid[neg_text], text_valid])
    fused = model.fuse(
        FeatureSequence(img_values), FeatureSequence(txt_values), text_valid=txt_valid
    )
    b = neg_text.shape[0]
    labels = torch.cat([torch.ones(b), torch.zeros(2 * b)]).to(fused.values.dtype)
    return itm_loss(fused.cls, labels, model.itm_head)


def itm_task(
    model: PretrainModel,
    image_feats: FeatureSequence,
    text_feats: FeatureSequence,
    tokens: TokenBatch,
    rng: torch.Generator,
    cfg: ModelConfig,
) -> torch.Tensor:
    """Fuse matched pairs plus mined negatives and score them with the ITM head."""
    with torch.no_grad():
        sims = itc_logits(
            model.itc_image_proj(image_feats.cls), model.itc_text_proj(text_feats.cls)
        )
    neg_text, neg_image = mine_hard_negatives(sims, rng, hard=cfg.itm_hard_negatives)
    return itm_with_negatives(
        model, image_feats, text_feats, tokens.attention_mask, neg_text, neg_image
    )


def apply_mlm_masking(
    tokens: TokenBatch,
    cfg: ModelConfig,
    rng: torch.Generator,
) -> tuple[TokenBatch, torch.Tensor]:
    """BERT-style corruption: select round(ratio * eligible) positions per row
    (floor 1), replace 80% with the mask id, 10% with a random word, keep 10%.

    Returns the corrupted batch and a boolean (B, 1+L) selection grid.
    """
    ids = tokens.ids.clone()
    b = ids.shape[0]
    eligible = tokens.attention_mask.clone()
    eligible[:, 0] = False  # CLS is never masked
    selected = torch.zeros_like(eligible)
    for row in range(b):
        slots = eligible[row].nonzero(as_tuple=True)[0]
        if slots.numel() == 0:
            continue
        k = max(1, round_half_up(cfg.mlm_ratio * slots.numel()))
        order = torch.randperm(slots.numel(), generator=rng)[:k]
        chosen = slots[order]
        selected[row, chosen] = True
        roll = torch.rand(k, generator=rng)
        for pos, u in zip(chosen.tolist(), roll.tolist()):
            if u < 0.8:
                ids[row, pos] = MASK_TOKEN_ID
            elif u < 0.9:
                ids[row, pos] = int(
                    torch.randint(NUM_SPECIAL_TOKENS, cfg.vocab_size, (1,), generator=rng)
                )
            # else: keep the original token
    return TokenBatch(ids=ids, lengths=tokens.lengths), selected


def mlm_from_corruption(
    tokens: TokenBatch,
    corrupted: TokenBatch,
    selected: torch.Tensor,
    image_feats: FeatureSequence,
    model: PretrainModel,
) -> torch.Tensor:
    """Cross entropy at the selected positions of the fused corrupted text."""
    text_feats = model.encode_text(corrupted)
    fused = model.fuse(image_feats, text_feats, text_valid=tokens.attention_mask)
    logits = model.mlm_head(fused.values)
    return F.cross_entropy(logits[selected], tokens.ids[selected])


def mlm_loss(
    tokens: TokenBatch,
    image_feats: FeatureSequence,
    model: PretrainModel,
    rng: torch.Generator,
    cfg: ModelConfig,
) -> torch.Tensor:
    """Corrupt a fraction of eligible tokens and score their reconstruction."""
    corrupted, selected = apply_mlm_masking(tokens, cfg, rng)
    if not selected.any():
        logger.warning("mlm: no eligible tokens to mask; returning zero loss")
        return torch.zeros(())
    return mlm_from_corruption(tokens, corrupted, selected, image_feats, model)


def prefix_token_batch(tokens: TokenBatch, splits: torch.Tensor) -> TokenBatch:
    """Keep the first ``splits[row]`` tokens of each row, padding out the rest."""
    ids = tokens.ids.clone()
    width = ids.shape[1]
    keep = torch.arange(width)[None, :] < splits[:, None]
    ids[~keep] = 0  # PAD_ID
    return TokenBatch(ids=ids, lengths=splits.clone())


def sample_plm_splits(lengths: torch.Tensor, rng: torch.Generator) -> torch.Tensor:
    """Uniform split point in [1, length-1] per row (1 for too-short rows)."""
    splits = torch.ones(lengths.shape[0], dtype=torch.long)
    for row in range(lengths.shape[0]):
        if lengths[row] >= 2:
            splits[row] = int(torch.randint(1, int(lengths[row]), (1,), generator=rng))
    return splits


def plm_from_splits(
    tokens: TokenBatch,
    splits: torch.Tensor,
    image_feats: FeatureSequence,
    model: PretrainModel,
) -> torch.Tensor:
    """Teacher-forced suffix CE for fixed split points (the deterministic half)."""
    prefix = prefix_token_batch(tokens, splits)
    prefix_feats = model.encode_text(prefix)
    fused = model.fuse(image_feats, prefix_feats, text_valid=prefix.attention_mask)
    logits = model.decode(fused, tokens, fused_valid=prefix.attention_mask)

    width = tokens.ids.shape[1]
    pos = torch.arange(width)[None, :]
    usable = tokens.lengths >= 2
    suffix = usable[:, None] & (pos >= splits[:, None]) & (pos < tokens.lengths[:, None])
    # logits[:, t-1] predicts token t
    target_rows, target_cols = suffix.nonzero(as_tuple=True)
    pred = logits[target_rows, target_cols - 1]
    return F.cross_entropy(pred, tokens.ids[target_rows, target_cols])


def plm_loss(
    tokens: TokenBatch,
    image_feats: FeatureSequence,
    model: PretrainModel,
    rng: torch.Generator,
    cfg: ModelConfig,
) -> torch.Tensor:
    """Prefix language modeling: split each caption, fuse the prefix with the
    image, and score the decoder's teacher-forced suffix predictions."""
    if (tokens.lengths < 2).all():
        logger.warning("plm: every row is shorter than 2 tokens; returning zero loss")
        return torch.zeros(())
    splits = sample_plm_splits(tokens.lengths, rng)
    return plm_from_splits(tokens, splits, image_feats, model)
