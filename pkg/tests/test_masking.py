"""Saliency net geometry and the two-tier masking sampler."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ropejepa import tensor as T
from ropejepa.masking import (MaskConfig, SaliencyNet, build_mask_plan,
                              pad_ragged, saliency_loss_weights)
from ropejepa.tensor import ContractError, ShapeError, Tape, Tensor


def test_saliency_scores_in_open_unit_interval(rng):
    net = SaliencyNet(64, 8, rng)
    s = net(Tensor(rng.random((2, 3, 64, 64)))).data
    assert s.shape == (2, 64)
    assert (s > 0).all() and (s < 1).all()


def test_saliency_grid_matches_patch_grid(rng):
    net = SaliencyNet(32, 4, rng)
    s = net(Tensor(rng.random((1, 3, 32, 32))))
    assert s.shape == (1, 16)


def test_saliency_rejects_non_power_of_two_factor(rng):
    with pytest.raises(ShapeError):
        SaliencyNet(48, 8, rng)


def test_saliency_receives_gradient_through_loss_weights(rng):
    net = SaliencyNet(64, 8, rng)
    imgs = Tensor(rng.random((1, 3, 64, 64)))
    tidx = np.array([[0, 5, 9]])
    tval = np.ones((1, 3), dtype=bool)
    with Tape() as tape:
        scores = net(imgs)
        w = saliency_loss_weights(scores, tidx, tval)
        loss = T.tsum(T.mul(w, T.const(np.array([[0.2, 1.0, 3.0]]))))
    tape.backward(loss)
    assert any(p.grad is not None and np.abs(p.grad).max() > 0 for p in net.parameters())


def test_uniform_saliency_dense_flags_tie_break():
    s = np.full((1, 64), 0.5)
    plan = build_mask_plan(s, np.random.default_rng(0))
    assert plan.dense_flags.sum() == 26          # ceil(0.4 * 64)
    np.testing.assert_array_equal(np.where(plan.dense_flags[0])[0], np.arange(26))


def test_partition_and_floor(rng):
    s = rng.random((4, 64))
    plan = build_mask_plan(s, rng)
    for ctx, tgt in zip(plan.context, plan.targets):
        union = np.sort(np.concatenate([ctx, tgt]))
        np.testing.assert_array_equal(union, np.arange(64))
        assert len(np.intersect1d(ctx, tgt)) == 0
        assert len(ctx) >= 10


def test_expected_mask_fraction():
    rng = np.random.default_rng(7)
    s = np.random.default_rng(1).random((1, 64))
    fractions = []
    for _ in range(10_000):
        plan = build_mask_plan(s, rng)
        fractions.append(len(plan.targets[0]) / 64)
    assert abs(np.mean(fractions) - 0.46) < 0.01


def test_tier_mask_rates():
    rng = np.random.default_rng(3)
    s = np.random.default_rng(2).random((1, 64))
    plan0 = build_mask_plan(s, rng)
    dense = plan0.dense_flags[0]
    dense_hits = np.zeros(64)
    n = 10_000
    for _ in range(n):
        plan = build_mask_plan(s, rng)
        masked = np.zeros(64, dtype=bool)
        masked[plan.targets[0]] = True
        dense_hits += masked
    rates = dense_hits / n
    assert 0.68 <= rates[dense].mean() <= 0.72
    assert 0.28 <= rates[~dense].mean() <= 0.32


def test_forced_floor_keeps_lowest_saliency_patches():
    s = np.random.default_rng(5).random((1, 64))
    cfg = MaskConfig(p_dense=1.0, p_background=1.0)
    plan = build_mask_plan(s, np.random.default_rng(0), cfg)
    assert len(plan.context[0]) == 10
    lowest = np.sort(np.argsort(s[0], kind="stable")[:10])
    np.testing.assert_array_equal(plan.context[0], lowest)


def test_determinism_under_seed():
    s = np.random.default_rng(4).random((3, 64))
    a = build_mask_plan(s, np.random.default_rng(11))
    b = build_mask_plan(s, np.random.default_rng(11))
    for ca, cb in zip(a.context, b.context):
        np.testing.assert_array_equal(ca, cb)
    np.testing.assert_array_equal(a.dense_flags, b.dense_flags)


def test_too_few_patches_rejected():
    with pytest.raises(ContractError):
        build_mask_plan(np.full((1, 10), 0.5), np.random.default_rng(0))


@given(st.integers(min_value=0, max_value=10_000))
def test_partition_property_random_seeds(seed):
    s = np.random.default_rng(seed % 17).random((1, 16))
    plan = build_mask_plan(s, np.random.default_rng(seed))
    union = np.sort(np.concatenate([plan.context[0], plan.targets[0]]))
    np.testing.assert_array_equal(union, np.arange(16))
    assert len(plan.context[0]) >= 10


def test_pad_ragged_shapes_and_validity():
    idx, valid = pad_ragged([np.array([3, 1]), np.array([2]), np.array([], dtype=int)])
    assert idx.shape == (3, 2)
    np.testing.assert_array_equal(idx[0], [3, 1])
    np.testing.assert_array_equal(valid, [[True, True], [True, False], [False, False]])
    assert idx[2, 0] == 0     # padding uses a safe in-range index


def test_saliency_weights_mean_one_per_image(rng):
    scores = Tensor(rng.random((2, 64)))
    tidx = np.array([[0, 3, 7, 0], [1, 2, 0, 0]])
    tval = np.array([[True, True, True, False], [True, True, False, False]])
    w = saliency_loss_weights(scores, tidx, tval).data
    assert abs(w[0, :3].mean() - 1.0) < 1e-9
    assert abs(w[1, :2].mean() - 1.0) < 1e-9
    assert (w[tval] > 0).all()
