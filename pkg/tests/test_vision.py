"""Encoder pair: patchify geometry, masked-context encoding, EMA law, freeze
policy."""

import numpy as np
import pytest

from ropejepa import tensor as T
from ropejepa.tensor import ContractError, ShapeError, Tensor
from ropejepa.vision import (EncoderPair, VisionTransformer, VitConfig,
                             phase2_block_count)


@pytest.fixture
def vit(rng):
    return VisionTransformer(VitConfig(), rng)


def test_token_count_64px_patch8(vit, rng):
    imgs = Tensor(rng.random((2, 3, 64, 64)))
    assert vit.patchify(imgs).shape == (2, 64, 64)


def test_token_count_224px_patch16():
    assert VitConfig(image_size=224, patch_size=16).num_tokens == 196


def test_zero_image_tokens_are_bias_plus_positions(vit):
    imgs = Tensor(np.zeros((1, 3, 64, 64)))
    tokens = vit.patchify(imgs).data
    want = vit.patch_proj.b.data + vit.pos_embed.data
    np.testing.assert_allclose(tokens[0], want, atol=1e-12)


def test_patchify_rejects_wrong_size(vit):
    with pytest.raises(ShapeError):
        vit.patchify(Tensor(np.zeros((1, 3, 32, 32))))


def test_patchify_row_major_patch_order(vit, rng):
    # paint patch (row 2, col 5) of the grid; only token 2*8+5 changes
    base = np.zeros((1, 3, 64, 64))
    hot = base.copy()
    hot[:, :, 16:24, 40:48] = 1.0
    t0 = vit.patchify(Tensor(base)).data
    t1 = vit.patchify(Tensor(hot)).data
    changed = np.where(np.abs(t1 - t0).sum(axis=2)[0] > 0)[0]
    np.testing.assert_array_equal(changed, [2 * 8 + 5])


def test_encode_full_shape(vit, rng):
    tokens = vit.patchify(Tensor(rng.random((2, 3, 64, 64))))
    assert vit.encode(tokens).shape == (2, 64, 64)


def test_encode_subset_shape_and_order(vit, rng):
    tokens = vit.patchify(Tensor(rng.random((1, 3, 64, 64))))
    keep = np.arange(10)[None, :]
    valid = np.ones((1, 10), dtype=bool)
    ctx = T.gather_rows(tokens, keep, valid)
    out = vit.encode(ctx, valid)
    assert out.shape == (1, 10, 64)


def test_restricted_attention_differs_from_full_pass(vit, rng):
    # with depth >= 1 the context-only pass sees fewer keys, so outputs differ
    tokens = vit.patchify(Tensor(rng.random((1, 3, 64, 64))))
    full = vit.encode(tokens).data
    keep = np.array([[3, 7, 11]])
    valid = np.ones((1, 3), dtype=bool)
    sub = vit.encode(T.gather_rows(tokens, keep, valid), valid).data
    assert np.abs(sub[0] - full[0, [3, 7, 11]]).max() > 1e-8


def test_encode_rejects_empty_visible_set(vit, rng):
    tokens = Tensor(rng.random((2, 4, 64)))
    valid = np.array([[True] * 4, [False] * 4])
    with pytest.raises(ContractError):
        vit.encode(tokens, valid)


def test_padded_full_valid_matches_unmasked(vit, rng):
    tokens = vit.patchify(Tensor(rng.random((1, 3, 64, 64))))
    plain = vit.encode(tokens).data
    masked = vit.encode(tokens, np.ones((1, 64), dtype=bool)).data
    np.testing.assert_allclose(masked, plain, atol=1e-12)


# --- EMA -----------------------------------------------------------------

def test_ema_lambda_one_is_frozen(rng):
    pair = EncoderPair(VitConfig(depth=1), rng, ema_lambda=1.0)
    before = {k: v.data.copy() for k, v in pair.target.named_parameters().items()}
    for p in pair.online.parameters():
        p.data += 1.0
    pair.ema_update()
    for k, v in pair.target.named_parameters().items():
        np.testing.assert_array_equal(v.data, before[k])


def test_ema_fixed_point(rng):
    pair = EncoderPair(VitConfig(depth=1), rng)
    before = {k: v.data.copy() for k, v in pair.target.named_parameters().items()}
    pair.ema_update()   # online == target at construction
    for k, v in pair.target.named_parameters().items():
        np.testing.assert_allclose(v.data, before[k], atol=1e-15)


def test_ema_direct_arithmetic(rng):
    pair = EncoderPair(VitConfig(depth=1), rng, ema_lambda=0.996)
    name, t = next(iter(pair.target.named_parameters().items()))
    o = pair.online.named_parameters()[name]
    t.data = np.ones_like(t.data)
    o.data = np.full_like(o.data, 0.5)
    pair.ema_update()
    np.testing.assert_allclose(t.data, 0.998, atol=1e-15)


def test_ema_geometric_contraction(rng):
    pair = EncoderPair(VitConfig(depth=1), rng, ema_lambda=0.996)
    for p in pair.online.parameters():
        p.data = p.data + 0.1
    for _ in range(5):
        gap_before = _gap(pair)
        pair.ema_update()
        assert abs(_gap(pair) / gap_before - 0.996) < 1e-12


def _gap(pair):
    op, tp = pair.online.named_parameters(), pair.target.named_parameters()
    return np.sqrt(sum(((tp[k].data - op[k].data) ** 2).sum() for k in op))


def test_target_forward_is_deterministic(rng):
    pair = EncoderPair(VitConfig(depth=2), rng)
    imgs = Tensor(rng.random((2, 3, 64, 64)))
    a = pair.encode_targets(imgs)
    b = pair.encode_targets(imgs)
    np.testing.assert_array_equal(a, b)


def test_target_never_requires_grad(rng):
    pair = EncoderPair(VitConfig(depth=1), rng)
    assert not any(p.requires_grad for p in pair.target.parameters())


# --- freeze policy -------------------------------------------------------

def test_phase2_block_count_scaling():
    assert phase2_block_count(32) == 6
    assert phase2_block_count(4) == 1
    assert phase2_block_count(8) == 2


def test_phase1_freezes_everything(vit):
    vit.backbone_blocks_trainable(1)
    assert vit.trainable_parameters() == []


def test_phase2_unfreezes_last_block_and_norm(vit):
    vit.backbone_blocks_trainable(2)
    trainable = {name for name, p in vit.named_parameters().items() if p.requires_grad}
    assert any(name.startswith("blocks.3.") for name in trainable)
    assert not any(name.startswith(("blocks.0.", "blocks.1.", "blocks.2.")) for name in trainable)
    assert "final_norm.gamma" in trainable and "final_norm.beta" in trainable
    assert "pos_embed" not in trainable
    assert not any(name.startswith("patch_proj") for name in trainable)


def test_invalid_phase_rejected(vit):
    with pytest.raises(ContractError):
        vit.backbone_blocks_trainable(3)


def test_config_validation():
    with pytest.raises(ShapeError):
        VitConfig(image_size=60, patch_size=8)
    with pytest.raises(ShapeError):
        VitConfig(embed_dim=30, heads=4)
