import pytest
import torch

from crossmim import ModelConfig, build_model
from crossmim.model import FeatureSequence, ImageBatch, TokenBatch
from helpers import grad_relative_error, make_tokens, rand_images


@pytest.fixture
def small_model(small_cfg):
    return build_model(small_cfg, seed=0)


def test_patchify_grid_arithmetic():
    cfg = ModelConfig()  # 32px images, 8px patches
    model = build_model(cfg, seed=0)
    out = model.image_encoder.patchify(rand_images(2, 32))
    assert out.shape == (2, 16, cfg.embed_dim)


def test_patchify_zero_image_zero_positions_gives_bias(small_cfg):
    model = build_model(small_cfg, seed=0)
    enc = model.image_encoder
    with torch.no_grad():
        enc.pos_embed.zero_()
    out = enc.patchify(ImageBatch(torch.zeros(1, 3, 16, 16)))
    expected = enc.patch_proj.bias.detach().expand_as(out)
    assert torch.equal(out, expected)


def test_patchify_patch_permutation(small_cfg):
    model = build_model(small_cfg, seed=0)
    enc = model.image_encoder
    with torch.no_grad():
        enc.pos_embed.zero_()
    img = rand_images(1, 16, seed=3).pixels
    p = small_cfg.patch_size
    swapped = img.clone()
    # swap patch 0 (grid 0,0) with patch 5 (grid 1,1)
    swapped[:, :, 0:p, 0:p] = img[:, :, p : 2 * p, p : 2 * p]
    swapped[:, :, p : 2 * p, p : 2 * p] = img[:, :, 0:p, 0:p]
    a = enc.patchify(ImageBatch(img))
    b = enc.patchify(ImageBatch(swapped))
    assert torch.equal(b[0, 0], a[0, 5])
    assert torch.equal(b[0, 5], a[0, 0])
    untouched = [i for i in range(small_cfg.num_patches) if i not in (0, 5)]
    assert torch.equal(b[0, untouched], a[0, untouched])


def test_encode_image_deterministic_and_text_free(small_model):
    img = rand_images(2, 16, seed=1)
    a = small_model.encode_image(img)
    b = small_model.encode_image(img, text=None)
    assert torch.equal(a.values, b.values)
    assert a.values.shape == (2, 17, small_model.cfg.embed_dim)


def test_inject_layer_out_of_range_is_config_error():
    with pytest.raises(ValueError, match="inject_start_layer"):
        ModelConfig(image_layers=6, inject_start_layer=7)


def test_encode_image_wrong_text_width(small_model):
    img = rand_images(2, 16)
    bad = FeatureSequence(torch.zeros(2, 5, small_model.cfg.embed_dim + 1))
    with pytest.raises(ValueError, match="incompatible"):
        small_model.encode_image(img, text=bad)


def test_degenerate_weights_make_text_invisible(small_cfg):
    """Zeroing the residual-path output layers from the injection layer on
    makes the text-present pass equal the text-free pass exactly."""
    model = build_model(small_cfg, seed=0)
    img = rand_images(2, 16, seed=2)
    tokens = make_tokens([[4, 5, 6], [7, 8]], 1 + small_cfg.max_text_len)
    text = FeatureSequence(torch.zeros(2, 1 + small_cfg.max_text_len, small_cfg.embed_dim))
    with torch.no_grad():
        for blk in model.image_encoder.blocks[small_cfg.inject_start_layer - 1 :]:
            blk.attn.out_proj.weight.zero_()
            blk.attn.out_proj.bias.zero_()
            blk.mlp.fc2.weight.zero_()
            blk.mlp.fc2.bias.zero_()
    with_text = model.encode_image(img, text=text, text_valid=tokens.attention_mask)
    without = model.encode_image(img)
    assert torch.equal(with_text.values, without.values)


def test_mask_replacement_invariant(small_cfg):
    """Masked slots carry mask_token + positional term; others are untouched."""
    model = build_model(small_cfg, seed=0)
    enc = model.image_encoder
    img = rand_images(3, 16, seed=4)
    idx = torch.tensor([[2, 7, 9], [1, 3, 16], [5, 6, 7]])
    plain = enc.embed(img)
    masked = enc.embed(img, mask=idx)
    for b in range(3):
        for slot in range(1 + small_cfg.num_patches):
            if slot in idx[b].tolist():
                expected = enc.mask_token + enc.pos_embed[0, slot]
                assert torch.equal(masked[b, slot], expected.detach())
            else:
                assert torch.equal(masked[b, slot], plain[b, slot])


def test_injection_boundary_taps(small_cfg):
    """Below the injection layer, activations are bit-identical with and
    without text."""
    cfg = ModelConfig(**{**small_cfg.to_dict(), "image_layers": 3, "inject_start_layer": 3})
    model = build_model(cfg, seed=0)
    img = rand_images(2, 16, seed=5)
    tokens = make_tokens([[4, 5], [6]], 1 + cfg.max_text_len)
    text = model.encode_text(tokens)
    _, taps_plain = model.encode_image(img, collect_taps=True)
    _, taps_text = model.encode_image(
        img, text=text, text_valid=tokens.attention_mask, collect_taps=True
    )
    for layer in range(cfg.inject_start_layer - 1):
        assert torch.equal(taps_plain[layer], taps_text[layer])
    assert not torch.equal(taps_plain[-1], taps_text[-1])


def test_encode_text_duplicate_rows(small_model, small_cfg):
    tokens = make_tokens([[4, 5, 6], [4, 5, 6]], 1 + small_cfg.max_text_len)
    out = small_model.encode_text(tokens)
    assert torch.equal(out.values[0], out.values[1])


def test_encode_text_single_token_two_slots():
    cfg = ModelConfig(
        image_size=16, patch_size=4, embed_dim=16, heads=2, image_layers=1,
        text_layers=1, fusion_layers=1, decoder_layers=1, vocab_size=16,
        max_text_len=1, inject_start_layer=1, code_dim=8, head_hidden_dim=8,
    )
    model = build_model(cfg, seed=0)
    out = model.encode_text(make_tokens([[4]], 2))
    assert out.values.shape == (1, 2, 16)


def test_encode_text_rejects_out_of_vocab(small_model, small_cfg):
    tokens = make_tokens([[small_cfg.vocab_size]], 1 + small_cfg.max_text_len)
    with pytest.raises(ValueError, match="vocabulary range"):
        small_model.encode_text(tokens)


def test_padding_does_not_leak_into_real_slots(small_model, small_cfg):
    """Non-pad outputs equal a truncated computation with the same weights."""
    enc = small_model.text_encoder
    tokens = make_tokens([[4, 5, 6]], 1 + small_cfg.max_text_len)
    full = enc(tokens).values[:, :4]

    with torch.no_grad():
        x = enc.tok_embed(tokens.ids[:, :4]) + enc.pos_embed[:, :4]
        valid = torch.ones(1, 4, dtype=torch.bool)
        for blk in enc.blocks:
            x = blk(x, key_valid=valid)
        truncated = enc.norm(x)
    assert torch.allclose(full, truncated, atol=1e-6)


def test_fuse_zero_cross_projection_is_residual_identity(small_cfg):
    model = build_model(small_cfg, seed=0)
    img_feats = model.encode_image(rand_images(2, 16, seed=6))
    tokens = make_tokens([[4, 5], [6, 7]], 1 + small_cfg.max_text_len)
    text_feats = model.encode_text(tokens)
    with torch.no_grad():
        for blk in model.fusion_encoder.blocks:
            blk.cross_attn.out_proj.weight.zero_()
            blk.cross_attn.out_proj.bias.zero_()
    fused = model.fuse(img_feats, text_feats, text_valid=tokens.attention_mask)
    self_only = model.fusion_encoder(
        img_feats, text_feats, text_valid=tokens.attention_mask, use_cross=False
    )
    assert torch.equal(fused.values, self_only.values)


def test_fuse_shape_contract(small_model, small_cfg):
    img_feats = small_model.encode_image(rand_images(2, 16))
    tokens = make_tokens([[4], [5]], 1 + small_cfg.max_text_len)
    text_feats = small_model.encode_text(tokens)
    fused = small_model.fuse(img_feats, text_feats)
    assert fused.values.shape == (2, 1 + small_cfg.max_text_len, small_cfg.embed_dim)


def test_fuse_batch_mismatch(small_model, small_cfg):
    img_feats = small_model.encode_image(rand_images(3, 16))
    text_feats = small_model.encode_text(make_tokens([[4]], 1 + small_cfg.max_text_len))
    with pytest.raises(ValueError, match="batch mismatch"):
        small_model.fuse(img_feats, text_feats)


def test_fuse_swapping_images_swaps_rows(small_model, small_cfg):
    img = rand_images(2, 16, seed=8)
    tokens = make_tokens([[4, 5], [4, 5]], 1 + small_cfg.max_text_len)
    img_feats = small_model.encode_image(img)
    text_feats = small_model.encode_text(tokens)
    fused = small_model.fuse(img_feats, text_feats, text_valid=tokens.attention_mask)
    flipped = small_model.fuse(
        FeatureSequence(img_feats.values.flip(0)), text_feats,
        text_valid=tokens.attention_mask,
    )
    assert torch.allclose(fused.values[0], flipped.values[1], atol=1e-6)
    assert torch.allclose(fused.values[1], flipped.values[0], atol=1e-6)


def test_decode_causality_and_vocab_axis(small_model, small_cfg):
    img_feats = small_model.encode_image(rand_images(1, 16))
    tokens_a = make_tokens([[4, 5, 6, 7]], 1 + small_cfg.max_text_len)
    tokens_b = make_tokens([[4, 5, 9, 10]], 1 + small_cfg.max_text_len)  # future differs
    fused = small_model.fuse(img_feats, small_model.encode_text(tokens_a))
    la = small_model.decode(fused, tokens_a)
    lb = small_model.decode(fused, tokens_b)
    assert la.shape[-1] == small_cfg.vocab_size
    # positions 0..1 consume only tokens 0..1, identical in both
    assert torch.equal(la[:, :2], lb[:, :2])
    assert not torch.equal(la[:, 2:], lb[:, 2:])


def test_decode_empty_prefix_rejected(small_model, small_cfg):
    img_feats = small_model.encode_image(rand_images(1, 16))
    fused = small_model.fuse(
        img_feats, small_model.encode_text(make_tokens([[4]], 1 + small_cfg.max_text_len))
    )
    empty = TokenBatch(ids=torch.zeros(1, 0, dtype=torch.long), lengths=torch.zeros(1, dtype=torch.long))
    with pytest.raises(ValueError, match="at least one"):
        small_model.decode(fused, empty)


def test_token_batch_validation(small_cfg):
    width = 1 + small_cfg.max_text_len
    good = make_tokens([[4, 5]], width)
    good.validate(small_cfg.vocab_size)
    bad_cls = TokenBatch(ids=good.ids.clone(), lengths=good.lengths.clone())
    bad_cls.ids[0, 0] = 4
    with pytest.raises(ValueError, match="CLS"):
        bad_cls.validate(small_cfg.vocab_size)
    bad_pad = TokenBatch(ids=good.ids.clone(), lengths=good.lengths.clone())
    bad_pad.ids[0, -1] = 5  # claims pad region but carries a word id
    with pytest.raises(ValueError, match="pad"):
        bad_pad.validate(small_cfg.vocab_size)


def test_network_output_gradients_match_fd(tiny_cfg):
    """Scalar reductions of each network's output pass a central-difference
    check on the sub-1k-parameter instance."""
    model = build_model(tiny_cfg, seed=1).double()
    img = rand_images(2, 4, seed=9, dtype=torch.float64)
    tokens = make_tokens([[4, 5], [4]], 1 + tiny_cfg.max_text_len)
    img_feats_fixed = FeatureSequence(
        torch.randn(2, 1 + tiny_cfg.num_patches, tiny_cfg.embed_dim,
                    generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    )
    text_feats_fixed = FeatureSequence(
        torch.randn(2, 1 + tiny_cfg.max_text_len, tiny_cfg.embed_dim,
                    generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    )
    checks = [
        (lambda: model.image_encoder(img).values.sum(), model.image_encoder.parameters()),
        (lambda: model.text_encoder(tokens).values.sum(), model.text_encoder.parameters()),
        (
            lambda: model.fusion_encoder(img_feats_fixed, text_feats_fixed).values.sum(),
            model.fusion_encoder.parameters(),
        ),
        (
            lambda: model.decoder(text_feats_fixed, tokens).sum(),
            model.decoder.parameters(),
        ),
    ]
    for loss_fn, params in checks:
        rel = grad_relative_error(loss_fn, list(params))
        assert rel < 1e-4, rel
