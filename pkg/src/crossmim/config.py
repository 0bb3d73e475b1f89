"""Central configuration for the model, training harness and data pipeline."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

MASKING_STRATEGIES = ("text_guided", "random")
MIM_SUPERVISIONS = ("codes", "pixels", "quantizer", "none")
AUGMENT_MODES = ("full", "identity")


@dataclass
class ModelConfig:
    """Every knob of the model and the toy training harness in one place.

    The defaults define a desk-scale instance: 32x32 images in 8x8 patches
    (16 patch slots), 64-dim features, and a 64-way categorical encoding
    space. All fields are plain scalars so the config serializes to JSON and
    hashes deterministically for checkpoint compatibility checks.
    """

    # geometry
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    heads: int = 4
    mlp_ratio: float = 2.0

    # encoder / decoder depths
    image_layers: int = 6
    text_layers: int = 3
    fusion_layers: int = 2
    decoder_layers: int = 2

    # text
    vocab_size: int = 128
    max_text_len: int = 16

    # encoding space and masked modeling
    code_dim: int = 64
    head_hidden_dim: int = 128
    inject_start_layer: int = 6  # 1-based; default = final image layer
    inject_text_mim: bool = True        # text injection in the masked student pass
    inject_text_targets: bool = True    # text injection in teacher target acquisition
    mask_ratio: float = 0.30
    masking: str = "text_guided"
    mim_supervision: str = "codes"
    quantizer_levels: int = 3  # per-channel levels of the pixel-quantizer baseline

    # self-distillation
    momentum: float = 0.99
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9
    use_teacher_centering: bool = True

    # auxiliary objectives
    mlm_ratio: float = 0.15
    itc_temp: float = 0.07
    itm_hard_negatives: bool = True

    # training harness
    batch_size: int = 32
    lr_image: float = 1e-3
    lr_rest: float = 1e-3
    lr_floor: float = 0.01  # cosine decays to this fraction of peak
    warmup_steps: int = 50
    weight_decay: float = 0.02
    augment_mode: str = "full"

    # synthetic corpus
    corpus_size: int = 288
    val_size: int = 32
    data_seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if not 1 <= self.inject_start_layer <= self.image_layers:
            raise ValueError(
                f"inject_start_layer {self.inject_start_layer} out of range "
                f"[1, {self.image_layers}]"
            )
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 <= self.center_momentum <= 1.0:
            raise ValueError(f"center_momentum must be in [0, 1], got {self.center_momentum}")
        for name in ("student_temp", "teacher_temp", "itc_temp"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in (
            "image_size", "patch_size", "embed_dim", "heads", "image_layers",
            "text_layers", "fusion_layers", "decoder_layers", "vocab_size",
            "max_text_len", "code_dim", "head_hidden_dim", "batch_size",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if not 0.0 < self.mlm_ratio < 1.0:
            raise ValueError(f"mlm_ratio must be in (0, 1), got {self.mlm_ratio}")
        if self.masking not in MASKING_STRATEGIES:
            raise ValueError(f"masking must be one of {MASKING_STRATEGIES}")
        if self.mim_supervision not in MIM_SUPERVISIONS:
            raise ValueError(f"mim_supervision must be one of {MIM_SUPERVISIONS}")
        if self.augment_mode not in AUGMENT_MODES:
            raise ValueError(f"augment_mode must be one of {AUGMENT_MODES}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size ** 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def config_hash(cfg: ModelConfig) -> str:
    """Stable hash of the full config, embedded in checkpoints."""
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
