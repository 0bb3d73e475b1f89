"""Retrieval evaluation and pattern-cluster analysis of patch codes."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import torch

from .data import CorpusTensors
from .distill import codes_from_logits
from .model import FeatureSequence, ImageBatch
from .objectives import itc_logits
from .train import TrainState


def rank_of_true(similarity: torch.Tensor) -> torch.Tensor:
    """Rank (1-based) of the diagonal entry per row, ties broken by lower index."""
    n = similarity.shape[0]
    idx = torch.arange(n)
    true = similarity[idx, idx]
    better = (similarity > true[:, None]).sum(dim=1)
    tied_lower = ((similarity == true[:, None]) & (idx[None, :] < idx[:, None])).sum(dim=1)
    return better + tied_lower + 1


def recall_at(ranks: torch.Tensor, k: int) -> float:
    return float((ranks <= k).float().mean())


@torch.no_grad()
def embed_split(state: TrainState, tensors: CorpusTensors, split: str):
    idx = tensors.train_idx if split == "train" else tensors.val_idx
    if idx.numel() == 0:
        raise ValueError(f"split {split!r} is empty")
    images = tensors.image_batch(idx)
    tokens = tensors.token_batch(idx)
    image_feats = state.model.encode_image(images)
    text_feats = state.model.encode_text(tokens)
    img_emb = state.model.itc_image_proj(image_feats.cls)
    txt_emb = state.model.itc_text_proj(text_feats.cls)
    return idx, images, tokens, image_feats, text_feats, img_emb, txt_emb


@torch.no_grad()
def eval_retrieval(
    state: TrainState,
    tensors: CorpusTensors,
    split: str = "val",
    rerank: bool = False,
    rerank_topk: int = 10,
) -> dict:
    """R@{1,5,10} in both directions over a split's in-split candidates.

    Ranks come from the ITC similarity matrix; with ``rerank`` the top
    candidates per query are reordered by the ITM match score.
    """
    idx, _, tokens, image_feats, text_feats, img_emb, txt_emb = embed_split(
        state, tensors, split
    )
    if idx.numel() < 2:
        raise ValueError("retrieval needs at least 2 pairs")
    sims = itc_logits(img_emb, txt_emb)
    if rerank:
        sims_i2t = _rerank(state, sims, image_feats, text_feats, tokens, rerank_topk, axis=1)
        sims_t2i = _rerank(state, sims, image_feats, text_feats, tokens, rerank_topk, axis=0).t()
    else:
        sims_i2t = sims
        sims_t2i = sims.t()
    out = {}
    for name, matrix in (("image_to_text", sims_i2t), ("text_to_image", sims_t2i)):
        ranks = rank_of_true(matrix)
        out[name] = {f"R@{k}": recall_at(ranks, k) for k in (1, 5, 10)}
    out["num_pairs"] = int(idx.numel())
    return out


@torch.no_grad()
def _rerank(state, sims, image_feats, text_feats, tokens, topk, axis):
    """Rescore each query's top-k candidates with the ITM head.

    axis=1 reranks texts per image; axis=0 reranks images per text. Returns a
    matrix shaped like ``sims`` where reranked candidates are lifted above the
    rest by an offset, preserving deterministic index tie-breaks.
    """
    base = sims if axis == 1 else sims.t()
    n = base.shape[0]
    k = min(topk, n)
    top = base.topk(k, dim=1).indices
    valid = tokens.attention_mask
    adjusted = base.clone()
    offset = base.max() - base.min() + 1.0
    for q in range(n):
        cand = top[q]
        if axis == 1:
            img = FeatureSequence(image_feats.values[q : q + 1].expand(k, -1, -1))
            txt = FeatureSequence(text_feats.values[cand])
            tv = valid[cand]
        else:
            img = FeatureSequence(image_feats.values[cand])
            txt = FeatureSequence(text_feats.values[q : q + 1].expand(k, -1, -1))
            tv = valid[q : q + 1].expand(k, -1)
        fused = state.model.fuse(img, txt, text_valid=tv)
        score = state.model.itm_head(fused.cls).squeeze(-1)
        adjusted[q, cand] = score + offset
    return adjusted if axis == 1 else adjusted


@dataclass
class PatternReport:
    """Argmax code assignments of every patch plus label purity."""

    code_ids: torch.Tensor      # (n_images, N)
    patch_labels: torch.Tensor  # (n_images, N) ground truth
    purity: float
    code_sizes: dict[int, int]

    @property
    def layout_grids(self) -> torch.Tensor:
        n, patches = self.code_ids.shape
        g = int(math.isqrt(patches))
        return self.code_ids.reshape(n, g, g)


def purity_score(code_ids: torch.Tensor, labels: torch.Tensor) -> tuple[float, dict[int, int]]:
    """Dataset-weighted fraction of each code's patches sharing the code's
    majority ground-truth label; also returns per-code member counts."""
    counts: dict[int, Counter] = {}
    for cid, lab in zip(code_ids.reshape(-1).tolist(), labels.reshape(-1).tolist()):
        counts.setdefault(cid, Counter())[lab] += 1
    pure = sum(c.most_common(1)[0][1] for c in counts.values())
    sizes = {cid: sum(c.values()) for cid, c in sorted(counts.items())}
    return pure / code_ids.numel(), sizes


@torch.no_grad()
def pattern_report(state: TrainState, tensors: CorpusTensors, split: str = "train") -> PatternReport:
    """Assign each patch its argmax teacher code (text-free pass) and score
    how well codes align with ground-truth shape/background labels."""
    idx = tensors.train_idx if split == "train" else tensors.val_idx
    if idx.numel() == 0:
        raise ValueError(f"split {split!r} is empty")
    cfg = state.cfg
    images = tensors.image_batch(idx)
    feats = state.teacher.encoder(ImageBatch(images.pixels))
    logits = state.teacher.head(feats.tokens)
    center = state.teacher.center if cfg.use_teacher_centering else None
    codes = codes_from_logits(logits, cfg.teacher_temp, center)
    code_ids = codes.probs.argmax(dim=-1)
    labels = tensors.patch_labels[idx]
    purity, sizes = purity_score(code_ids, labels)
    return PatternReport(
        code_ids=code_ids,
        patch_labels=labels,
        purity=purity,
        code_sizes=sizes,
    )
