"""Gated cross-attention fusion, checked against hand-derived special cases."""

import numpy as np
import pytest

from ropejepa import tensor as T
from ropejepa.fusion import ConcatFusion, FusionConfig, FusionModule
from ropejepa.gradcheck import finite_difference_check
from ropejepa.nn import LayerNorm
from ropejepa.taxonomy import CLASSES
from ropejepa.tensor import ContractError, Tape, Tensor

CFG = FusionConfig(vis_dim=16, text_dim=12, heads=2, num_classes=14)


@pytest.fixture
def fm(rng):
    return FusionModule(CFG, rng)


def _text(rng, B=2, L=5, d=CFG.text_dim):
    t = Tensor(rng.normal(size=(B, L, d)))
    valid = np.ones((B, L), dtype=bool)
    return t, valid


def _vision(rng, B=2, N=6, d=CFG.vis_dim):
    return Tensor(rng.normal(size=(B, N, d)))


# -- text projection ---------------------------------------------------------

def test_projection_output_dim(fm, rng):
    t, _ = _text(rng)
    assert fm.project_text(t).shape == (2, 5, CFG.vis_dim)


def test_projection_zero_input_gives_normed_bias(fm, rng):
    t = Tensor(np.zeros((1, 3, CFG.text_dim)))
    fm.proj.b.data[:] = rng.normal(size=CFG.vis_dim)
    out = fm.project_text(t).data
    ln = LayerNorm(CFG.vis_dim)
    want = ln(Tensor(fm.proj.b.data[None, None, :])).data[0, 0]
    for row in out.reshape(-1, CFG.vis_dim):
        np.testing.assert_allclose(row, want, atol=1e-12)


def test_projection_identity_weights_reduce_to_layer_norm(rng):
    cfg = FusionConfig(vis_dim=12, text_dim=12, heads=2, num_classes=14)
    fm = FusionModule(cfg, rng)
    fm.proj.w.data[:] = np.eye(12)
    fm.proj.b.data[:] = 0.0
    t = Tensor(rng.normal(size=(2, 4, 12)))
    want = LayerNorm(12)(t).data
    np.testing.assert_allclose(fm.project_text(t).data, want, atol=1e-12)


def test_projection_dim_mismatch_rejected(fm, rng):
    with pytest.raises(Exception):
        fm.project_text(Tensor(rng.normal(size=(1, 3, CFG.text_dim + 1))))


# -- cross attention ---------------------------------------------------------

def test_constant_text_rows_collapse_attention(fm, rng):
    # every key/value identical: softmax weights are irrelevant, each query
    # sees wo(wv(t)) exactly
    t_row = rng.normal(size=CFG.text_dim)
    t = Tensor(np.repeat(t_row[None, None, :], 5, axis=1))
    that = fm.project_text(t)
    vis = _vision(rng, B=1)
    out = fm.cross_attend(vis, that, np.ones((1, 5), dtype=bool)).data
    v = that.data[0, 0] @ fm.attn.wv.w.data + fm.attn.wv.b.data
    want = v @ fm.attn.wo.w.data + fm.attn.wo.b.data
    for row in out[0]:
        np.testing.assert_allclose(row, want, atol=1e-10)


def test_padded_text_has_no_influence(fm, rng):
    t, valid = _text(rng, B=1)
    valid[0, 3:] = False
    vis = _vision(rng, B=1)
    base = fm.cross_attend(vis, fm.project_text(t), valid).data
    t2 = Tensor(t.data.copy())
    t2.data[0, 3:] += 50.0
    again = fm.cross_attend(vis, fm.project_text(t2), valid).data
    np.testing.assert_allclose(base, again, atol=1e-12)


def test_all_pad_rows_fall_back_to_bos_slot(fm, rng):
    t, valid = _text(rng, B=2)
    valid[1, :] = False
    vis = _vision(rng, B=2)
    out = fm.cross_attend(vis, fm.project_text(t), valid).data
    only_bos = valid.copy()
    only_bos[1, :] = False
    only_bos[1, 0] = True
    want = fm.cross_attend(vis, fm.project_text(t), only_bos).data
    np.testing.assert_allclose(out[1], want[1], atol=1e-12)
    assert np.isfinite(out).all()


# -- gates -------------------------------------------------------------------

def test_gate_init_gives_half_alpha(fm):
    alpha = fm.alpha_for_classes(np.array([0, 5, 13]))
    np.testing.assert_allclose(alpha.data, 0.5, atol=1e-15)
    assert alpha.shape == (3, 1, 1)


def test_gate_value_two_maps_through_sigmoid(fm):
    fm.gates.data[7] = 2.0
    alpha = fm.alpha_for_classes(np.array([7]))
    np.testing.assert_allclose(alpha.data[0, 0, 0], 1 / (1 + np.exp(-2.0)),
                               atol=1e-12)


def test_gate_index_out_of_range_rejected(fm):
    with pytest.raises(ContractError):
        fm.alpha_for_classes(np.array([14]))


def test_strongly_negative_gate_suppresses_text(fm, rng):
    fm.gates.data[:] = -20.0
    t, valid = _text(rng)
    vis = _vision(rng)
    fused = fm.fuse(vis, t, valid, fm.alpha_for_classes(np.array([0, 1])))
    only_vis = fm.fuse_vision_only(vis)
    np.testing.assert_allclose(fused.data, only_vis.data, atol=1e-6)


def test_absent_classes_get_no_gate_gradient(fm, rng):
    t, valid = _text(rng)
    vis = _vision(rng)
    with Tape() as tape:
        p = fm.fuse(vis, t, valid, fm.alpha_for_classes(np.array([3, 3])))
        loss = T.tsum(p * p)
    tape.backward(loss)
    g = fm.gates.grad
    assert g is not None
    assert abs(g[3]) > 0
    others = np.delete(g, 3)
    np.testing.assert_array_equal(others, np.zeros_like(others))


def test_alpha_mean_averages_the_batch_gates(fm):
    fm.gates.data[:] = np.linspace(-1, 1, 14)
    a = fm.alpha_mean(batch=3)
    want = 1 / (1 + np.exp(-float(np.mean(fm.gates.data))))
    np.testing.assert_allclose(a.data, want, atol=1e-12)
    assert a.shape == (3, 1, 1)


# -- fusion and pooling ------------------------------------------------------

def test_zero_init_ffn_passes_residual_through(fm, rng):
    fm.ffn.fc2.w.data[:] = 0.0
    fm.ffn.fc2.b.data[:] = 0.0
    f = _vision(rng)
    np.testing.assert_allclose(fm.ffn_refine(f).data, f.data, atol=1e-12)


def test_pool_is_token_mean(fm, rng):
    f = _vision(rng)
    np.testing.assert_allclose(fm.pool(f).data, f.data.mean(axis=1), atol=1e-12)


def test_pool_is_permutation_invariant(fm, rng):
    f = _vision(rng, B=1)
    perm = rng.permutation(f.shape[1])
    np.testing.assert_allclose(fm.pool(f).data,
                               fm.pool(Tensor(f.data[:, perm])).data, atol=1e-12)


def test_float_alpha_one_adds_full_attention(fm, rng):
    t, valid = _text(rng)
    vis = _vision(rng)
    that = fm.project_text(t)
    att = fm.cross_attend(vis, that, valid)
    full = fm.gate_and_fuse(vis, att, alpha=1.0)
    np.testing.assert_allclose(full.data, vis.data + att.data, atol=1e-12)


def test_float_alpha_zero_matches_vision_only(fm, rng):
    t, valid = _text(rng)
    vis = _vision(rng)
    gated = fm.fuse(vis, t, valid, alpha=0.0)
    np.testing.assert_allclose(gated.data, fm.fuse_vision_only(vis).data,
                               atol=1e-12)


def test_fuse_output_shape(fm, rng):
    t, valid = _text(rng)
    vis = _vision(rng)
    p = fm.fuse(vis, t, valid, fm.alpha_for_classes(np.array([0, 1])))
    assert p.shape == (2, CFG.vis_dim)


def test_gates_csv_has_one_row_per_class(fm):
    names = [c.name for c in CLASSES]
    lines = fm.gates_csv(names).strip().splitlines()
    assert lines[0] == "class,gate,alpha"
    assert len(lines) == 15
    first = lines[1].split(",")
    assert first[0] == CLASSES[0].name
    assert float(first[2]) == pytest.approx(0.5)


def test_gradients_flow_end_to_end(fm, rng):
    t, valid = _text(rng)
    vis = _vision(rng)
    params = dict(fm.named_parameters())

    def f():
        p = fm.fuse(vis, t, valid, fm.alpha_for_classes(np.array([2, 9])))
        return T.tmean(p * p)

    report = finite_difference_check(f, params, max_coords_per_param=4,
                                     rng=np.random.default_rng(5))
    assert report.passed(1e-4), report.summary()


# -- concat baseline ---------------------------------------------------------

def test_concat_fusion_shape_and_pad_exclusion(rng):
    cf = ConcatFusion(CFG, rng)
    t, valid = _text(rng, B=1)
    valid[0, 2:] = False
    vis = _vision(rng, B=1)
    p = cf.fuse(vis, t, valid)
    assert p.shape == (1, CFG.vis_dim)
    t2 = Tensor(t.data.copy())
    t2.data[0, 2:] = 99.0
    np.testing.assert_allclose(p.data, cf.fuse(vis, t2, valid).data, atol=1e-12)


def test_concat_fusion_has_no_gates(rng):
    cf = ConcatFusion(CFG, rng)
    assert not any("gates" in n for n in cf.named_parameters())
