"""Training loop, optimizer/schedule, and lossless checkpointing."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from .config import ModelConfig, config_hash
from .data import (
    CorpusTensors,
    Vocabulary,
    augment_two_views,
    corpus_from_config,
    prepare_tensors,
)
from .distill import TeacherState, ema_update, student_snapshot, update_center
from .mim import mim_step
from .model import ImageBatch, PretrainModel, TokenBatch, build_model
from .objectives import LossBundle, itc_loss, itm_task, mlm_loss, plm_loss, total_loss

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainBatch:
    images: ImageBatch
    tokens: TokenBatch


@dataclass
class TrainState:
    cfg: ModelConfig
    model: PretrainModel
    teacher: TeacherState
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    step: int
    total_steps: int
    seed: int

    @property
    def config_hash(self) -> str:
        return config_hash(self.cfg)


def build_optimizer(model: PretrainModel, cfg: ModelConfig) -> torch.optim.Optimizer:
    """AdamW with decoupled weight decay and two learning-rate groups."""
    image, rest = model.param_groups()
    return torch.optim.AdamW(
        [
            {"params": image, "lr": cfg.lr_image, "peak_lr": cfg.lr_image},
            {"params": rest, "lr": cfg.lr_rest, "peak_lr": cfg.lr_rest},
        ],
        weight_decay=cfg.weight_decay,
    )


def lr_scale(step: int, total_steps: int, warmup: int, floor: float) -> float:
    """Linear warmup to the peak, then cosine decay to floor * peak."""
    if warmup > 0 and step <= warmup:
        return step / warmup
    if total_steps <= warmup:
        return 1.0
    t = min(max((step - warmup) / (total_steps - warmup), 0.0), 1.0)
    return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


def new_train_state(cfg: ModelConfig, seed: int, total_steps: int) -> TrainState:
    model = build_model(cfg, seed=seed)
    teacher = TeacherState.from_student(model)
    generator = torch.Generator().manual_seed(seed)
    return TrainState(
        cfg=cfg,
        model=model,
        teacher=teacher,
        optimizer=build_optimizer(model, cfg),
        generator=generator,
        step=0,
        total_steps=total_steps,
        seed=seed,
    )


def train_step(state: TrainState, batch: TrainBatch) -> tuple[TrainState, LossBundle]:
    """One optimization step over all six objectives, then teacher maintenance."""
    cfg = state.cfg
    model = state.model
    g = state.generator

    scale = lr_scale(state.step + 1, state.total_steps, cfg.warmup_steps, cfg.lr_floor)
    for group in state.optimizer.param_groups:
        group["lr"] = group["peak_lr"] * scale

    views = augment_two_views(batch.images, g, mode=cfg.augment_mode)
    text_feats = model.encode_text(batch.tokens)
    view1_feats = model.encode_image(views.view1)

    mim = mim_step(
        views, batch.tokens, model, state.teacher, cfg, g,
        text_feats=text_feats, view1_feats=view1_feats,
    )
    itc = itc_loss(
        model.itc_image_proj(view1_feats.cls),
        model.itc_text_proj(text_feats.cls),
        model.itc_temperature,
    )
    itm = itm_task(model, view1_feats, text_feats, batch.tokens, g, cfg)
    mlm = mlm_loss(batch.tokens, view1_feats, model, g, cfg)
    plm = plm_loss(batch.tokens, view1_feats, model, g, cfg)

    bundle = total_loss(mim.loss_cls, mim.loss_patch, itc, itm, mlm, plm)

    state.optimizer.zero_grad(set_to_none=True)
    bundle.total.backward()
    state.optimizer.step()

    ema_update(state.teacher, student_snapshot(model), cfg.momentum)
    if cfg.use_teacher_centering:
        update_center(state.teacher, mim.teacher_logits, cfg.center_momentum)

    state.step += 1
    return state, bundle


def save_checkpoint(state: TrainState, path) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": state.cfg.to_dict(),
            "config_hash": state.config_hash,
            "step": state.step,
            "total_steps": state.total_steps,
            "seed": state.seed,
            "model": state.model.state_dict(),
            "teacher": state.teacher.state_dict(),
            "optimizer": state.optimizer.state_dict(),
            "rng": state.generator.get_state(),
        },
        path,
    )


def load_checkpoint(
    path,
    expected_config: ModelConfig | None = None,
    force: bool = False,
) -> TrainState:
    """Rebuild a TrainState for bit-identical continuation.

    Refuses to load when the embedded config hash disagrees with the stored
    config or with ``expected_config``, unless ``force`` is set.
    """
    payload = torch.load(path, weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = ModelConfig.from_dict(payload["config"])
    stored_hash = payload["config_hash"]
    if stored_hash != config_hash(cfg) and not force:
        raise ValueError("checkpoint config hash does not match its embedded config")
    if expected_config is not None and config_hash(expected_config) != stored_hash:
        if not force:
            raise ValueError(
                "checkpoint was written with a different config "
                f"(hash {stored_hash[:12]}...); pass force to load anyway"
            )
        cfg = expected_config
    state = new_train_state(cfg, seed=payload["seed"], total_steps=payload["total_steps"])
    state.model.load_state_dict(payload["model"])
    state.teacher.load_state_dict(payload["teacher"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.generator.set_state(payload["rng"])
    state.step = payload["step"]
    return state


def prepare_corpus(cfg: ModelConfig) -> tuple[CorpusTensors, Vocabulary]:
    vocab = Vocabulary()
    manifest = corpus_from_config(cfg)
    return prepare_tensors(manifest, vocab, cfg), vocab


def sample_batch(tensors: CorpusTensors, batch_size: int, g: torch.Generator) -> TrainBatch:
    pick = torch.randint(0, tensors.train_idx.shape[0], (batch_size,), generator=g)
    idx = tensors.train_idx[pick]
    return TrainBatch(images=tensors.image_batch(idx), tokens=tensors.token_batch(idx))


def pretrain(
    cfg: ModelConfig,
    seed: int,
    steps: int,
    out_dir,
    resume: str | None = None,
    save_every: int | None = None,
) -> tuple[TrainState, list[dict]]:
    """Train for ``steps`` steps on the synthetic corpus, logging one record
    per step to train_log.jsonl and writing a final checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state = load_checkpoint(resume, expected_config=cfg)
        logger.info("resumed from %s at step %d", resume, state.step)
    else:
        state = new_train_state(cfg, seed=seed, total_steps=steps)
    tensors, _ = prepare_corpus(cfg)
    cfg.save_json(out / "config.json")

    records: list[dict] = []
    log_path = out / "train_log.jsonl"
    mode = "a" if resume is not None else "w"
    with open(log_path, mode) as log:
        while state.step < steps:
            batch = sample_batch(tensors, cfg.batch_size, state.generator)
            try:
                state, bundle = train_step(state, batch)
            except FloatingPointError:
                logger.exception("aborting at step %d; last checkpoint preserved", state.step)
                raise
            record = {"step": state.step, **bundle.to_floats()}
            record["lr_image"] = state.optimizer.param_groups[0]["lr"]
            record["lr_rest"] = state.optimizer.param_groups[1]["lr"]
            records.append(record)
            log.write(json.dumps(record) + "\n")
            if save_every and state.step % save_every == 0:
                save_checkpoint(state, out / f"checkpoint_step{state.step}.pt")
    save_checkpoint(state, out / "checkpoint.pt")
    return state, records
