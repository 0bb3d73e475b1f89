"""Shared test utilities: finite-difference oracle and input builders."""

import torch

from crossmim.model import CLS_ID, PAD_ID, ImageBatch, TokenBatch


def finite_difference_grad(loss_fn, params, h: float = 1e-6) -> torch.Tensor:
    """Central-difference gradient of loss_fn() over the given parameters.

    loss_fn must be deterministic and must not consume shared RNG state.
    Returns the flattened gradient in parameter order.
    """
    out = []
    with torch.no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            g = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                step = h * max(1.0, abs(orig))
                flat[i] = orig + step
                f_plus = float(loss_fn())
                flat[i] = orig - step
                f_minus = float(loss_fn())
                flat[i] = orig
                g[i] = (f_plus - f_minus) / (2.0 * step)
            out.append(g)
    return torch.cat(out)


def analytic_grad(loss_fn, params) -> torch.Tensor:
    for p in params:
        p.grad = None
    loss_fn().backward()
    return torch.cat(
        [
            (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
            for p in params
        ]
    )


def grad_relative_error(loss_fn, params, h: float = 1e-6) -> float:
    an = analytic_grad(loss_fn, params)
    fd = finite_difference_grad(loss_fn, params, h=h)
    denom = max(float(fd.norm()), float(an.norm()), 1e-12)
    return float((fd - an).norm()) / denom


def make_tokens(rows, width, vocab_size=None) -> TokenBatch:
    """Rows are lists of word ids (without CLS); pads fill to the grid width."""
    ids = torch.full((len(rows), width), PAD_ID, dtype=torch.long)
    lengths = torch.zeros(len(rows), dtype=torch.long)
    for r, words in enumerate(rows):
        ids[r, 0] = CLS_ID
        for j, w in enumerate(words, start=1):
            ids[r, j] = w
        lengths[r] = 1 + len(words)
    return TokenBatch(ids=ids, lengths=lengths)


def rand_images(batch, size, seed=0, dtype=torch.float32) -> ImageBatch:
    g = torch.Generator().manual_seed(seed)
    return ImageBatch(torch.rand(batch, 3, size, size, generator=g, dtype=dtype))
