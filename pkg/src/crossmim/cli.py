"""Command-line entry points: pretrain, eval-retrieval, visualize-patterns,
mask-debug."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .config import ModelConfig
from .data import corpus_from_config
from .evaluate import eval_retrieval, pattern_report
from .mim import select_masks
from .train import load_checkpoint, prepare_corpus, pretrain


def _load_config(path: str | None) -> ModelConfig:
    return ModelConfig.from_json(path) if path else ModelConfig()


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    pretrain(
        cfg,
        seed=args.seed,
        steps=args.steps,
        out_dir=args.out,
        resume=args.resume,
        save_every=args.save_every,
    )
    print(f"finished {args.steps} steps; artifacts in {args.out}")
    return 0


def cmd_eval_retrieval(args) -> int:
    state = load_checkpoint(args.ckpt, force=args.force)
    tensors, _ = prepare_corpus(state.cfg)
    table = eval_retrieval(state, tensors, split=args.split, rerank=args.rerank)
    print(json.dumps(table, indent=2))
    return 0


def cmd_visualize_patterns(args) -> int:
    state = load_checkpoint(args.ckpt, force=args.force)
    tensors, _ = prepare_corpus(state.cfg)
    manifest = corpus_from_config(state.cfg)
    report = pattern_report(state, tensors, split=args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "report.json", "w") as fh:
        json.dump(
            {
                "split": args.split,
                "purity": report.purity,
                "num_images": report.code_ids.shape[0],
                "num_codes_used": len(report.code_sizes),
                "code_sizes": {str(k): v for k, v in report.code_sizes.items()},
            },
            fh,
            indent=2,
        )
    idx = manifest.split_indices(args.split)
    grids = report.layout_grids
    with open(out / "layouts.txt", "w") as fh:
        for row, rec_idx in enumerate(idx):
            fh.write(f"# image {rec_idx}: {manifest.records[rec_idx].caption}\n")
            for line in grids[row].tolist():
                fh.write(" ".join(f"{c:3d}" for c in line) + "\n")
            fh.write("\n")
    wrote_png = _maybe_write_png(grids, out / "layouts.png")
    names = "report.json, layouts.txt" + (", layouts.png" if wrote_png else "")
    print(f"purity={report.purity:.4f}; wrote {names} to {out}")
    return 0


def _maybe_write_png(grids: torch.Tensor, path: Path, max_images: int = 16) -> bool:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logging.getLogger(__name__).warning("matplotlib unavailable; skipping PNG")
        return False
    n = min(max_images, grids.shape[0])
    cols = 4
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2 * cols, 2 * rows))
    for i, ax in enumerate(axes.flat):
        ax.axis("off")
        if i < n:
            ax.imshow(grids[i].numpy(), cmap="tab20", interpolation="nearest")
            ax.set_title(f"image {i}", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def cmd_mask_debug(args) -> int:
    state = load_checkpoint(args.ckpt, force=args.force)
    tensors, _ = prepare_corpus(state.cfg)
    manifest = corpus_from_config(state.cfg)
    if not 0 <= args.image_idx < len(manifest.records):
        raise SystemExit(f"image index {args.image_idx} out of range")
    idx = torch.tensor([args.image_idx])
    images = tensors.image_batch(idx)
    tokens = tensors.token_batch(idx)
    text_feats = state.model.encode_text(tokens)
    rng = torch.Generator().manual_seed(args.seed)
    masks, sim = select_masks(images, text_feats, state.model, state.cfg, rng)
    mask = masks[0]
    record = {
        "image_idx": args.image_idx,
        "caption": manifest.records[args.image_idx].caption,
        "strategy": state.cfg.masking,
        "ratio": mask.ratio,
        "num_masked": mask.num_masked,
        "similarity": [round(v, 6) for v in sim[0].tolist()],
        "probs": [round(v, 6) for v in mask.probs.tolist()],
        "indices": list(mask.indices),
    }
    print(json.dumps(record))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossmim",
        description="Desk-scale vision-language pretraining with text-involved MIM",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train on the synthetic corpus")
    p.add_argument("--config", default=None, help="JSON config mirroring ModelConfig fields")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--save-every", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval-retrieval", help="recall table from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--rerank", action="store_true", help="rescore top candidates with the match head")
    p.add_argument("--force", action="store_true", help="load despite config-hash mismatch")
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("visualize-patterns", help="patch-code clusters and layouts")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_visualize_patterns)

    p = sub.add_parser("mask-debug", help="dump masking probabilities for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image-idx", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_mask_debug)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
