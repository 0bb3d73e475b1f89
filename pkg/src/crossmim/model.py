"""Trainable networks: image/text encoders, fusion encoder, decoder, heads.

The image encoder supports replacing selected patch embeddings with a learned
mask token before the first layer, and appending text features to its
self-attention sequence from a configurable layer onward so that visual
tokens can attend to them. Text slots are dropped from the output, keeping
the encoder contract (CLS + N patch slots) stable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .masking import PatchMask

PAD_ID = 0
CLS_ID = 1
MASK_TOKEN_ID = 2
UNK_ID = 3
NUM_SPECIAL_TOKENS = 4


@dataclass
class FeatureSequence:
    """Batch of token features: slot 0 is CLS, slots 1..S are patch/word slots."""

    values: torch.Tensor  # (batch, 1 + slots, dim)

    @property
    def cls(self) -> torch.Tensor:
        return self.values[:, 0]

    @property
    def tokens(self) -> torch.Tensor:
        return self.values[:, 1:]

    @property
    def num_slots(self) -> int:
        return self.values.shape[1] - 1

    def validate(self) -> None:
        if self.values.ndim != 3:
            raise ValueError(f"feature values must be 3-d, got shape {tuple(self.values.shape)}")
        if not torch.isfinite(self.values).all():
            raise ValueError("feature values contain non-finite entries")


@dataclass
class ImageBatch:
    """Batch of RGB images with pixel values in [0, 1]."""

    pixels: torch.Tensor  # (batch, 3, H, W)

    def validate(self, image_size: int | None = None) -> None:
        if self.pixels.ndim != 4 or self.pixels.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) pixels, got {tuple(self.pixels.shape)}")
        b, c, h, w = self.pixels.shape
        if h != w:
            raise ValueError(f"images must be square, got {h}x{w}")
        if image_size is not None and h != image_size:
            raise ValueError(f"image size {h} does not match configured {image_size}")
        if not torch.isfinite(self.pixels).all():
            raise ValueError("pixels contain non-finite entries")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValueError("pixels must lie in [0, 1]")


@dataclass
class TokenBatch:
    """Token id grid (batch, 1 + L) with per-row lengths counting real tokens.

    Column 0 holds the CLS id; real word tokens follow, then pad ids.
    """

    ids: torch.Tensor      # (batch, 1 + max_text_len) long
    lengths: torch.Tensor  # (batch,) long, includes the CLS slot

    @property
    def attention_mask(self) -> torch.Tensor:
        """Boolean (batch, 1 + L); True at non-pad slots."""
        width = self.ids.shape[1]
        return torch.arange(width, device=self.ids.device)[None, :] < self.lengths[:, None]

    def validate(self, vocab_size: int) -> None:
        if self.ids.ndim != 2:
            raise ValueError(f"token ids must be 2-d, got {tuple(self.ids.shape)}")
        if self.ids.min() < 0 or self.ids.max() >= vocab_size:
            raise ValueError(
                f"token ids out of vocabulary range [0, {vocab_size}): "
                f"min={int(self.ids.min())} max={int(self.ids.max())}"
            )
        if (self.ids[:, 0] != CLS_ID).any():
            raise ValueError("slot 0 of every row must hold the CLS token id")
        if (self.lengths < 1).any() or (self.lengths > self.ids.shape[1]).any():
            raise ValueError("token lengths out of range")
        if (self.ids * ~self.attention_mask).any():
            raise ValueError("padded positions must carry the pad id")


class Attention(nn.Module):
    """Multi-head attention over (query, key/value) inputs.

    `key_valid` marks attendable key slots; `causal` adds a lower-triangular
    mask (only meaningful when queries and keys are the same sequence).
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(
        self,
        query: torch.Tensor,
        kv: torch.Tensor,
        key_valid: torch.Tensor | None = None,
        causal: bool = False,
    ) -> torch.Tensor:
        b, tq, d = query.shape
        tk = kv.shape[1]
        q = self.q_proj(query).view(b, tq, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(kv).view(b, tk, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(kv).view(b, tk, self.heads, self.head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) * self.scale
        if key_valid is not None:
            scores = scores.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        if causal:
            future = torch.triu(
                torch.ones(tq, tk, dtype=torch.bool, device=query.device), diagonal=1
            )
            scores = scores.masked_fill(future[None, None], float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, tq, d)
        return self.out_proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.norm1 = nn.LayerNorm(d)
        self.attn = Attention(d, cfg.heads)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = Mlp(d, int(d * cfg.mlp_ratio))

    def forward(
        self,
        x: torch.Tensor,
        key_valid: torch.Tensor | None = None,
        causal: bool = False,
    ) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, key_valid=key_valid, causal=causal)
        x = x + self.mlp(self.norm2(x))
        return x


class CrossBlock(nn.Module):
    """Self-attention + cross-attention block (queries are the first argument)."""

    def __init__(self, cfg: ModelConfig, causal_self: bool = False):
        super().__init__()
        d = cfg.embed_dim
        self.causal_self = causal_self
        self.norm1 = nn.LayerNorm(d)
        self.self_attn = Attention(d, cfg.heads)
        self.norm_cross = nn.LayerNorm(d)
        self.cross_attn = Attention(d, cfg.heads)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = Mlp(d, int(d * cfg.mlp_ratio))

    def forward(
        self,
        x: torch.Tensor,
        context: torch.Tensor,
        self_valid: torch.Tensor | None = None,
        context_valid: torch.Tensor | None = None,
    ) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.self_attn(h, h, key_valid=self_valid, causal=self.causal_self)
        x = x + self.cross_attn(self.norm_cross(x), context, key_valid=context_valid)
        x = x + self.mlp(self.norm2(x))
        return x


def _mask_index_tensor(
    mask: "PatchMask | Sequence[PatchMask] | torch.Tensor",
    batch: int,
    num_patches: int,
    device,
) -> torch.Tensor:
    """Normalize mask input to a (batch, M) tensor of 1-based patch slots."""
    if isinstance(mask, torch.Tensor):
        idx = mask.to(device=device, dtype=torch.long)
        if idx.ndim == 1:
            idx = idx.unsqueeze(0).expand(batch, -1)
    else:
        masks = [mask] if isinstance(mask, PatchMask) else list(mask)
        if len(masks) == 1 and batch > 1:
            masks = masks * batch
        if len(masks) != batch:
            raise ValueError(f"got {len(masks)} masks for batch of {batch}")
        idx = torch.stack([m.index_tensor(device) for m in masks])
    if idx.numel() and (idx.min() < 1 or idx.max() > num_patches):
        raise ValueError(f"mask indices must lie in [1, {num_patches}]")
    return idx


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.num_patches
        d = cfg.embed_dim
        self.patch_proj = nn.Linear(cfg.patch_dim, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + n, d))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.image_layers))
        self.norm = nn.LayerNorm(d)

    def flatten_patches(self, pixels: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, N, 3*p*p), patches in row-major grid order."""
        p = self.cfg.patch_size
        b, c, h, w = pixels.shape
        if h != self.cfg.image_size or w != self.cfg.image_size:
            raise ValueError(
                f"image size {h}x{w} does not match configured {self.cfg.image_size}"
            )
        g = h // p
        x = pixels.reshape(b, c, g, p, g, p)
        x = x.permute(0, 2, 4, 1, 3, 5)  # (B, gh, gw, c, p, p)
        return x.reshape(b, g * g, c * p * p)

    def patchify(self, image: ImageBatch) -> torch.Tensor:
        """Patch embeddings (B, N, D): linear map of pixels plus positional term."""
        image.validate(self.cfg.image_size)
        return self.patch_proj(self.flatten_patches(image.pixels)) + self.pos_embed[:, 1:]

    def embed(
        self,
        image: ImageBatch,
        mask: "PatchMask | Sequence[PatchMask] | torch.Tensor | None" = None,
    ) -> torch.Tensor:
        """Pre-layer-1 sequence (B, 1+N, D) with mask-token replacement applied."""
        image.validate(self.cfg.image_size)
        b = image.pixels.shape[0]
        emb = self.patch_proj(self.flatten_patches(image.pixels))
        if mask is not None:
            idx = _mask_index_tensor(mask, b, self.cfg.num_patches, emb.device)
            emb = emb.clone()
            emb.scatter_(
                1,
                (idx - 1).unsqueeze(-1).expand(-1, -1, emb.shape[-1]),
                self.mask_token.to(emb.dtype).expand(b, idx.shape[1], -1),
            )
        x = torch.cat([self.cls_token.to(emb.dtype).expand(b, -1, -1), emb], dim=1)
        return x + self.pos_embed

    def _joint_valid(self, b: int, text_valid: torch.Tensor | None, device) -> torch.Tensor | None:
        if text_valid is None:
            return None
        vis = torch.ones(b, 1 + self.cfg.num_patches, dtype=torch.bool, device=device)
        return torch.cat([vis, text_valid], dim=1)

    def forward(
        self,
        image: ImageBatch,
        text: FeatureSequence | None = None,
        mask=None,
        text_valid: torch.Tensor | None = None,
        collect_taps: bool = False,
    ):
        """Encode an image batch, optionally with text injection and patch masking.

        Returns a FeatureSequence of the 1+N visual slots; injected text slots
        are dropped. With ``collect_taps`` also returns the per-layer visual
        activations (list of (B, 1+N, D) tensors).
        """
        cfg = self.cfg
        x = self.embed(image, mask)
        n_vis = 1 + cfg.num_patches
        text_values = None
        if text is not None:
            text_values = text.values
            if text_values.shape[-1] != cfg.embed_dim or text_values.shape[0] != x.shape[0]:
                raise ValueError(
                    f"text features of shape {tuple(text_values.shape)} incompatible "
                    f"with image features {tuple(x.shape)}"
                )
        taps = []
        key_valid = None
        for layer, blk in enumerate(self.blocks, start=1):
            if text_values is not None and layer == cfg.inject_start_layer:
                key_valid = self._joint_valid(x.shape[0], text_valid, x.device)
                x = torch.cat([x, text_values], dim=1)
            x = blk(x, key_valid=key_valid)
            if collect_taps:
                taps.append(x[:, :n_vis])
        out = FeatureSequence(self.norm(x[:, :n_vis]))
        if collect_taps:
            return out, taps
        return out

    def forward_dual(
        self,
        image: ImageBatch,
        text: FeatureSequence | None,
        text_valid: torch.Tensor | None = None,
        mask=None,
    ) -> tuple[FeatureSequence, FeatureSequence]:
        """Shared-trunk double pass: plain output and text-injected output.

        Layers below the injection point run once; the tail runs twice, first
        text-free and then with text appended. With ``text=None`` the second
        output is the first.
        """
        cfg = self.cfg
        x = self.embed(image, mask)
        split = cfg.inject_start_layer - 1
        for blk in self.blocks[:split]:
            x = blk(x)
        xa = x
        for blk in self.blocks[split:]:
            xa = blk(xa)
        plain = FeatureSequence(self.norm(xa))
        if text is None:
            return plain, plain
        n_vis = 1 + cfg.num_patches
        key_valid = self._joint_valid(x.shape[0], text_valid, x.device)
        xb = torch.cat([x, text.values], dim=1)
        for blk in self.blocks[split:]:
            xb = blk(xb, key_valid=key_valid)
        injected = FeatureSequence(self.norm(xb[:, :n_vis]))
        return plain, injected


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.tok_embed = nn.Embedding(cfg.vocab_size, d)
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + cfg.max_text_len, d))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.text_layers))
        self.norm = nn.LayerNorm(d)

    def forward(self, tokens: TokenBatch) -> FeatureSequence:
        tokens.validate(self.cfg.vocab_size)
        x = self.tok_embed(tokens.ids) + self.pos_embed[:, : tokens.ids.shape[1]]
        valid = tokens.attention_mask
        for blk in self.blocks:
            x = blk(x, key_valid=valid)
        return FeatureSequence(self.norm(x))


class FusionEncoder(nn.Module):
    """Cross-modal encoder: text slots as queries attending to image slots."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(CrossBlock(cfg) for _ in range(cfg.fusion_layers))
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(
        self,
        image_feats: FeatureSequence,
        text_feats: FeatureSequence,
        text_valid: torch.Tensor | None = None,
        use_cross: bool = True,
    ) -> FeatureSequence:
        img = image_feats.values
        x = text_feats.values
        if img.shape[0] != x.shape[0]:
            raise ValueError(
                f"batch mismatch: image {img.shape[0]} vs text {x.shape[0]}"
            )
        for blk in self.blocks:
            if use_cross:
                x = blk(x, img, self_valid=text_valid)
            else:
                h = blk.norm1(x)
                x = x + blk.self_attn(h, h, key_valid=text_valid)
                x = x + blk.mlp(blk.norm2(x))
        return FeatureSequence(self.norm(x))


class Decoder(nn.Module):
    """Causal decoder over token ids, cross-attending to fused features."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.tok_embed = nn.Embedding(cfg.vocab_size, d)
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + cfg.max_text_len, d))
        self.blocks = nn.ModuleList(
            CrossBlock(cfg, causal_self=True) for _ in range(cfg.decoder_layers)
        )
        self.norm = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, cfg.vocab_size)

    def forward(
        self,
        fused: FeatureSequence,
        tokens: TokenBatch,
        fused_valid: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Next-token logits (B, T, V): logits[:, t] conditions on tokens <= t."""
        ids = tokens.ids
        if ids.shape[1] < 1:
            raise ValueError("decoder needs at least one input position")
        x = self.tok_embed(ids) + self.pos_embed[:, : ids.shape[1]]
        for blk in self.blocks:
            x = blk(x, fused.values, context_valid=fused_valid)
        return self.out_proj(self.norm(x))


class EncodingHead(nn.Module):
    """MLP mapping features to logits over the K-dimensional encoding space."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.embed_dim, cfg.head_hidden_dim)
        self.fc2 = nn.Linear(cfg.head_hidden_dim, cfg.code_dim)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(features)))


class PretrainModel(nn.Module):
    """Student networks plus the task heads used by the training objectives."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg)
        self.text_encoder = TextEncoder(cfg)
        self.fusion_encoder = FusionEncoder(cfg)
        self.decoder = Decoder(cfg)
        self.encoding_head = EncodingHead(cfg)
        d = cfg.embed_dim
        self.itc_image_proj = nn.Linear(d, d)
        self.itc_text_proj = nn.Linear(d, d)
        self.itm_head = nn.Linear(d, 1)
        self.mlm_head = nn.Linear(d, cfg.vocab_size)
        # heads for the baseline MIM supervision modes only
        if cfg.mim_supervision == "pixels":
            self.pixel_head = nn.Linear(d, cfg.patch_dim)
        if cfg.mim_supervision == "quantizer":
            self.quantizer_head = nn.Linear(d, cfg.quantizer_levels ** 3)
        self.itc_log_temp = nn.Parameter(torch.tensor(math.log(cfg.itc_temp)))
        self.apply(_init_weights)
        for p in (
            self.image_encoder.cls_token,
            self.image_encoder.mask_token,
            self.image_encoder.pos_embed,
            self.text_encoder.pos_embed,
            self.decoder.pos_embed,
        ):
            nn.init.trunc_normal_(p, std=0.02)

    @property
    def itc_temperature(self) -> torch.Tensor:
        return self.itc_log_temp.exp()

    def encode_image(self, image, text=None, mask=None, text_valid=None, **kw):
        return self.image_encoder(image, text=text, mask=mask, text_valid=text_valid, **kw)

    def encode_text(self, tokens: TokenBatch) -> FeatureSequence:
        return self.text_encoder(tokens)

    def fuse(self, image_feats, text_feats, text_valid=None) -> FeatureSequence:
        return self.fusion_encoder(image_feats, text_feats, text_valid=text_valid)

    def decode(self, fused, tokens, fused_valid=None) -> torch.Tensor:
        return self.decoder(fused, tokens, fused_valid=fused_valid)

    def param_groups(self) -> tuple[list, list]:
        """(image-encoder params, everything else) for the two learning rates."""
        image = list(self.image_encoder.parameters())
        image_ids = {id(p) for p in image}
        rest = [p for p in self.parameters() if id(p) not in image_ids]
        return image, rest


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.trunc_normal_(module.weight, std=0.02)


def build_model(cfg: ModelConfig, seed: int = 0) -> PretrainModel:
    """Construct a model with seed-reproducible initialization."""
    torch.manual_seed(seed)
    return PretrainModel(cfg)
