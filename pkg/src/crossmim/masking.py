"""Text-guided and random selection of masked patch positions."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch

logger = logging.getLogger(__name__)


@dataclass
class PatchMask:
    """Masked-patch index set for one image.

    ``indices`` are 1-based patch slots (slot 0 of a feature sequence is CLS,
    so slot i for i in [1..N] is patch i). ``probs`` is the length-N sampling
    distribution the indices were drawn from.
    """

    indices: tuple[int, ...]
    probs: torch.Tensor
    ratio: float

    @property
    def num_masked(self) -> int:
        return len(self.indices)

    def index_tensor(self, device=None) -> torch.Tensor:
        return torch.tensor(self.indices, dtype=torch.long, device=device)

    def bool_tensor(self, num_patches: int) -> torch.Tensor:
        """Length-N boolean vector over 0-based patch positions."""
        out = torch.zeros(num_patches, dtype=torch.bool)
        out[self.index_tensor() - 1] = True
        return out

    def validate(self) -> None:
        n = self.probs.shape[-1]
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("mask indices must be unique")
        if self.indices and not (1 <= min(self.indices) and max(self.indices) <= n):
            raise ValueError(f"mask indices must lie in [1, {n}]")
        if len(self.indices) != mask_count(n, self.ratio):
            raise ValueError(
                f"expected {mask_count(n, self.ratio)} masked patches, got {len(self.indices)}"
            )
        if self.probs.min() < 0 or abs(float(self.probs.sum()) - 1.0) > 1e-4:
            raise ValueError("sampling probabilities must lie on the simplex")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def mask_count(num_patches: int, ratio: float) -> int:
    """Number of patches to mask: round-half-up of ratio*N, floor 1."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must be in (0, 1), got {ratio}")
    return max(1, round_half_up(ratio * num_patches))


def patch_text_similarity(patch_feats: torch.Tensor, text_global: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of each patch feature to the paired text's global feature.

    (B, N, D) x (B, D) -> (B, N), in [-1, 1]. Slots where either vector has
    zero norm get similarity 0.
    """
    if not (torch.isfinite(patch_feats).all() and torch.isfinite(text_global).all()):
        raise ValueError("similarity inputs must be finite")
    dot = (patch_feats * text_global[:, None, :]).sum(dim=-1)
    denom = patch_feats.norm(dim=-1) * text_global.norm(dim=-1)[:, None]
    sim = torch.where(denom > 0, dot / denom.clamp_min(torch.finfo(dot.dtype).tiny), torch.zeros_like(dot))
    return sim.clamp(-1.0, 1.0)


def sampling_probabilities(similarity: torch.Tensor) -> torch.Tensor:
    """Softmax over the patch axis, used as masked-patch sampling weights."""
    return torch.softmax(similarity, dim=-1)


def sample_mask_batch(
    probs: torch.Tensor,
    ratio: float,
    rng: torch.Generator,
) -> list[PatchMask]:
    """Draw one PatchMask per row of ``probs`` (B, N), without replacement.

    Each mask holds M = round-half-up(ratio*N) distinct indices drawn
    sequentially proportional to the row's probabilities, renormalizing after
    every draw. Rows that run out of positive mass before M draws fall back
    to uniform sampling over the remaining slots (with a diagnostic).
    """
    if probs.ndim == 1:
        probs = probs.unsqueeze(0)
    b, n = probs.shape
    if probs.min() < 0 or (probs.sum(dim=1) <= 0).any():
        raise ValueError("sampling probabilities must be non-negative with positive mass")
    m = mask_count(n, ratio)
    remaining = probs.to(torch.float64).clone()
    chosen = torch.zeros(b, n, dtype=torch.bool)
    picks = torch.empty(b, m, dtype=torch.long)
    rows = torch.arange(b)
    fell_back = False
    for j in range(m):
        dead = remaining.sum(dim=1) <= 0
        if dead.any():
            fell_back = True
            remaining[dead] = (~chosen[dead]).to(remaining.dtype)
        idx = torch.multinomial(remaining, 1, generator=rng).squeeze(1)
        picks[:, j] = idx
        chosen[rows, idx] = True
        remaining[rows, idx] = 0.0
    if fell_back:
        logger.warning("mask sampling fell back to uniform for rows with exhausted probability mass")
    masks = []
    for row in range(b):
        idx = tuple(sorted(int(i) + 1 for i in picks[row]))
        masks.append(PatchMask(indices=idx, probs=probs[row], ratio=ratio))
    return masks


def sample_mask(probs: torch.Tensor, ratio: float, rng: torch.Generator) -> PatchMask:
    """Single-image form of :func:`sample_mask_batch`."""
    return sample_mask_batch(probs.reshape(1, -1), ratio, rng)[0]


def random_mask(num_patches: int, ratio: float, rng: torch.Generator) -> PatchMask:
    """Uniform-probability masking baseline."""
    probs = torch.full((num_patches,), 1.0 / num_patches)
    return sample_mask(probs, ratio, rng)
