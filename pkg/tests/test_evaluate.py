import math

import pytest
import torch

from crossmim import ModelConfig
from crossmim.evaluate import eval_retrieval, pattern_report, rank_of_true, recall_at
from crossmim.train import new_train_state, prepare_corpus


@pytest.fixture(scope="module")
def eval_cfg():
    return ModelConfig(
        image_size=16, patch_size=4, embed_dim=16, heads=2, image_layers=2,
        text_layers=1, fusion_layers=1, decoder_layers=1, vocab_size=32,
        max_text_len=8, code_dim=8, head_hidden_dim=16, inject_start_layer=2,
        corpus_size=24, val_size=8, batch_size=4,
    )


@pytest.fixture(scope="module")
def eval_state(eval_cfg):
    tensors, _ = prepare_corpus(eval_cfg)
    return new_train_state(eval_cfg, seed=0, total_steps=1), tensors


def test_rank_identity_matrix():
    ranks = rank_of_true(torch.eye(6))
    assert (ranks == 1).all()
    assert recall_at(ranks, 1) == 1.0


def test_rank_constant_matrix_enumeration():
    """With all-equal similarities and lower-index tie-breaks, query i's true
    candidate lands at rank i+1; R@k follows by direct enumeration."""
    n = 8
    ranks = rank_of_true(torch.zeros(n, n))
    assert ranks.tolist() == list(range(1, n + 1))
    for k in (1, 5, 8):
        expected = sum(1 for i in range(n) if i + 1 <= k) / n
        assert recall_at(ranks, k) == pytest.approx(expected)


def test_rank_tie_break_prefers_lower_index():
    sims = torch.tensor([[0.5, 0.5, 0.1], [0.2, 0.9, 0.2], [0.3, 0.3, 0.3]])
    ranks = rank_of_true(sims)
    assert ranks.tolist() == [1, 1, 3]


def test_recall_monotone(eval_state):
    state, tensors = eval_state
    table = eval_retrieval(state, tensors, split="val")
    for direction in ("image_to_text", "text_to_image"):
        r = table[direction]
        assert 0.0 <= r["R@1"] <= r["R@5"] <= r["R@10"] <= 1.0
    assert table["num_pairs"] == 8


def test_retrieval_empty_split_rejected(eval_cfg):
    cfg = ModelConfig(**{**eval_cfg.to_dict(), "val_size": 0})
    tensors, _ = prepare_corpus(cfg)
    state = new_train_state(cfg, seed=0, total_steps=1)
    with pytest.raises(ValueError, match="empty"):
        eval_retrieval(state, tensors, split="val")


def test_retrieval_rerank_flag_runs(eval_state):
    state, tensors = eval_state
    table = eval_retrieval(state, tensors, split="val", rerank=True, rerank_topk=4)
    for direction in ("image_to_text", "text_to_image"):
        r = table[direction]
        assert r["R@1"] <= r["R@5"] <= r["R@10"]


def test_pattern_report_shapes_and_purity_bounds(eval_state):
    state, tensors = eval_state
    report = pattern_report(state, tensors, split="train")
    n_train = tensors.train_idx.shape[0]
    assert report.code_ids.shape == (n_train, state.cfg.num_patches)
    g = int(math.isqrt(state.cfg.num_patches))
    assert report.layout_grids.shape == (n_train, g, g)
    assert 0.0 < report.purity <= 1.0
    assert sum(report.code_sizes.values()) == n_train * state.cfg.num_patches


def test_pattern_report_identical_embeddings_single_code(eval_state):
    state, tensors = eval_state
    with torch.no_grad():
        state.teacher.head.fc1.weight.zero_()
        state.teacher.head.fc1.bias.zero_()
    report = pattern_report(state, tensors, split="train")
    assert len(report.code_sizes) == 1
    # every patch shares one code; purity equals the majority-label share
    labels = tensors.patch_labels[tensors.train_idx].reshape(-1)
    majority = labels.bincount().max()
    assert report.purity == pytest.approx(float(majority) / labels.numel())


def test_purity_formula_hand_example():
    """Code 0 holds five label-1 patches (pure); code 1 holds {2: 2, 1: 1}."""
    from crossmim.evaluate import purity_score

    code_ids = torch.tensor([[0, 0, 0, 1], [1, 1, 0, 0]])
    labels = torch.tensor([[1, 1, 1, 2], [2, 1, 1, 1]])
    purity, sizes = purity_score(code_ids, labels)
    assert purity == pytest.approx((5 + 2) / 8)
    assert sizes == {0: 5, 1: 3}
