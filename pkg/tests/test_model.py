"""Whole-model wiring: the six experiment arms, gating modes, masked paths."""

import numpy as np
import pytest

from ropejepa.data import make_splits
from ropejepa.fusion import ConcatFusion, FusionModule, VisionOnlyFusion
from ropejepa.model import (ABLATIONS, CrossModalModel, ModelConfig,
                            build_vocabulary, encode_descriptions,
                            parameter_count)
from ropejepa.tensor import ContractError, Tensor


@pytest.fixture(scope="module")
def corpus():
    ds = make_splits(counts={"train": [2] * 14, "val": [1] * 14,
                             "test": [1] * 14}, seed=11)
    train = ds.splits["train"]
    vocab = build_vocabulary(train)
    images = np.stack([s.image for s in train[:6]])
    labels = np.array([s.class_index for s in train[:6]])
    return ds, vocab, images, labels


def _model(vocab, tag="E1", seed=0):
    return CrossModalModel(ModelConfig(ablation=tag), len(vocab),
                           np.random.default_rng(seed))


def _text(vocab, model, ds, n=6):
    return encode_descriptions(vocab, ds.splits["train"][:n],
                               model.cfg.text_max_len)


def test_config_rejects_unknown_ablation():
    with pytest.raises(ContractError):
        ModelConfig(ablation="E7")


def test_config_rejects_bad_uniform_p():
    with pytest.raises(ContractError):
        ModelConfig(uniform_mask_p=0.0)
    with pytest.raises(ContractError):
        ModelConfig(uniform_mask_p=1.5)


def test_all_arms_construct_and_embed(corpus):
    ds, vocab, images, labels = corpus
    for tag in ABLATIONS:
        m = _model(vocab, tag)
        if tag == "E4":
            ids = valid = None
        else:
            ids, valid = _text(vocab, m, ds)
        emb = m.embed(images, ids, valid, gate_mode="predicted")
        assert emb.shape == (6, m.cfg.vit.embed_dim)
        assert np.isfinite(emb).all(), tag


def test_fusion_head_types_per_arm(corpus):
    _, vocab, _, _ = corpus
    assert isinstance(_model(vocab, "E1").fusion, FusionModule)
    assert isinstance(_model(vocab, "E4").fusion, VisionOnlyFusion)
    assert isinstance(_model(vocab, "E6").fusion, ConcatFusion)


def test_e4_has_no_text_modules(corpus):
    _, vocab, _, _ = corpus
    m = _model(vocab, "E4")
    assert not hasattr(m, "text")
    assert not hasattr(m, "null_text")
    with pytest.raises(ContractError):
        m.encode_text(np.zeros((2, 4), dtype=np.intp),
                      np.ones((2, 4)))


def test_e4_strictly_fewer_parameters(corpus):
    _, vocab, _, _ = corpus
    assert parameter_count(_model(vocab, "E4")) < \
        parameter_count(_model(vocab, "E1"))


def test_e3_has_no_saliency_net(corpus):
    _, vocab, images, _ = corpus
    m = _model(vocab, "E3")
    assert not hasattr(m, "saliency")
    assert m.saliency_scores(Tensor(images)) is None


def test_e3_plan_is_uniform(corpus):
    # with flat scores every patch shares one mask probability, so across
    # many plans the realized mask fraction concentrates near uniform_mask_p
    _, vocab, _, _ = corpus
    m = _model(vocab, "E3")
    rng = np.random.default_rng(0)
    rates = []
    for _ in range(300):
        plan = m.make_plan(None, 4, rng)
        n = m.cfg.vit.num_tokens
        rates.append(np.mean([len(t) / n for t in plan.targets]))
    assert abs(np.mean(rates) - m.cfg.uniform_mask_p) < 0.01


def test_e1_plan_needs_scores(corpus):
    _, vocab, images, _ = corpus
    m = _model(vocab, "E1")
    with pytest.raises(ContractError):
        m.make_plan(None, 4, np.random.default_rng(0))


def test_predict_masked_shapes_and_alignment(corpus):
    _, vocab, images, _ = corpus
    m = _model(vocab, "E1")
    img = Tensor(images[:4])
    scores = m.saliency_scores(img)
    plan = m.make_plan(scores.data, 4, np.random.default_rng(1))
    z_hat, z_target, tidx, tval = m.predict_masked(img, plan)
    assert z_hat.shape == z_target.shape
    assert z_hat.shape[0] == 4 and z_hat.shape[2] == m.cfg.vit.embed_dim
    assert tidx.shape == tval.shape == z_hat.shape[:2]
    # target rows must be the EMA encoder's rows at the planned indices
    full = m.encoders.encode_targets(img)
    for b in range(4):
        k = int(tval[b].sum())
        np.testing.assert_array_equal(z_target[b, :k],
                                      full[b, tidx[b, :k]])


def test_target_rows_gradient_blocked(corpus):
    # z_target comes back as a plain array, so nothing downstream can
    # backpropagate into the EMA encoder
    _, vocab, images, _ = corpus
    m = _model(vocab, "E1")
    img = Tensor(images[:2])
    plan = m.make_plan(m.saliency_scores(img).data, 2,
                       np.random.default_rng(2))
    _, z_target, _, _ = m.predict_masked(img, plan)
    assert isinstance(z_target, np.ndarray)


def test_null_text_features_broadcast(corpus):
    _, vocab, _, _ = corpus
    m = _model(vocab, "E1")
    feats, valid = m.null_text_features(5)
    assert feats.shape == (5, 1, m.cfg.text_dim)
    assert valid.shape == (5, 1) and valid.all()
    # all rows share the single learned vector
    base = feats.data[0, 0]
    for b in range(5):
        np.testing.assert_array_equal(feats.data[b, 0], base)


def test_embed_null_text_mode(corpus):
    _, vocab, images, _ = corpus
    m = _model(vocab, "E1")
    emb = m.embed(images, None, None, text_mode="null")
    assert emb.shape == (6, m.cfg.vit.embed_dim)
    assert np.isfinite(emb).all()


def test_embed_rejects_unknown_modes(corpus):
    ds, vocab, images, _ = corpus
    m = _model(vocab, "E1")
    ids, valid = _text(vocab, m, ds)
    with pytest.raises(ContractError):
        m.embed(images, ids, valid, gate_mode="magic")
    with pytest.raises(ContractError):
        m.embed(images, ids, valid, text_mode="magic")


def test_gate_modes_differ_when_gates_are_spread(corpus):
    ds, vocab, images, labels = corpus
    m = _model(vocab, "E1")
    # spread the gates so label vs mean gating is visibly different
    m.fusion.gates.data = np.linspace(-3.0, 3.0, m.cfg.num_classes)
    ids, valid = _text(vocab, m, ds)
    by_label = m.embed(images, ids, valid, gate_mode="label",
                       class_indices=labels)
    by_mean = m.embed(images, ids, valid, gate_mode="mean")
    assert not np.allclose(by_label, by_mean)


def test_predicted_gate_mode_matches_manual_two_pass(corpus):
    ds, vocab, images, labels = corpus
    m = _model(vocab, "E1")
    m.fusion.gates.data = np.linspace(-2.0, 2.0, m.cfg.num_classes)
    ids, valid = _text(vocab, m, ds)
    auto = m.embed(images, ids, valid, gate_mode="predicted")
    # manual: mean-gated pass, argmax, then label-gated with those labels
    first = m.embed(images, ids, valid, gate_mode="mean")
    pred = np.argmax(m.logits(Tensor(first)).data, axis=1)
    manual = m.embed(images, ids, valid, gate_mode="label",
                     class_indices=pred)
    np.testing.assert_allclose(auto, manual, atol=1e-12)


def test_e2_alpha_fixed_to_one(corpus):
    ds, vocab, images, labels = corpus
    m = _model(vocab, "E2")
    ids, valid = _text(vocab, m, ds)
    # whatever the gates say, E2 ignores them
    m.fusion.gates.data = np.full(m.cfg.num_classes, -20.0)
    out = m.embed(images, ids, valid, gate_mode="label",
                  class_indices=labels)
    # manual alpha = 1.0 through the fusion module
    vis = m.encoders.online.forward_full(Tensor(images))
    feats = m.encode_text(ids, valid)
    ref = m.fusion.fuse(vis, feats, valid, 1.0)
    np.testing.assert_allclose(out, ref.data, atol=1e-12)


def test_e6_ignores_gate_mode(corpus):
    ds, vocab, images, labels = corpus
    m = _model(vocab, "E6")
    ids, valid = _text(vocab, m, ds)
    a = m.embed(images, ids, valid, gate_mode="label", class_indices=labels)
    b = m.embed(images, ids, valid, gate_mode="mean")
    np.testing.assert_array_equal(a, b)


def test_label_mode_requires_class_indices(corpus):
    ds, vocab, images, _ = corpus
    m = _model(vocab, "E1")
    ids, valid = _text(vocab, m, ds)
    with pytest.raises(ContractError):
        m.embed(images, ids, valid, gate_mode="label")


def test_embed_batch_consistency(corpus):
    # embedding a batch equals embedding its rows one at a time
    ds, vocab, images, _ = corpus
    m = _model(vocab, "E1")
    ids, valid = _text(vocab, m, ds)
    full = m.embed(images, ids, valid, gate_mode="mean")
    singles = np.concatenate([
        m.embed(images[i:i + 1], ids[i:i + 1], valid[i:i + 1],
                gate_mode="mean") for i in range(len(images))])
    np.testing.assert_allclose(full, singles, atol=1e-10)


def test_vocabulary_built_from_train_split_only(corpus):
    ds, vocab, _, _ = corpus
    held_out = ds.splits["test"]
    ids, valid = encode_descriptions(vocab, held_out, 32)
    assert ids.shape[0] == len(held_out)
    assert valid.shape == ids.shape


def test_parameter_count_matches_manual_sum(corpus):
    _, vocab, _, _ = corpus
    m = _model(vocab, "E1")
    manual = sum(p.data.size for p in m.parameters())
    assert parameter_count(m) == manual
