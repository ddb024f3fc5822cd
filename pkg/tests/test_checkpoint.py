"""Container round trips, corruption detection, config files, manifests."""

import dataclasses

import numpy as np
import pytest

from ropejepa.checkpoint import (CheckpointError, RunManifest,
                                 check_vit_compatible, code_fingerprint,
                                 config_from_dict, config_hash,
                                 config_to_dict, format_config,
                                 load_checkpoint, make_checkpoint,
                                 new_manifest, parse_config_text,
                                 restore_model, run_dir_name, save_checkpoint)
from ropejepa.data import make_splits
from ropejepa.model import encode_descriptions
from ropejepa.training import AdamW, TrainConfig, parameter_groups, run_curriculum
from ropejepa.vision import VitConfig

TINY = {"train": [2] * 14, "val": [1] * 14, "test": [1] * 14}


@pytest.fixture(scope="module")
def trained():
    ds = make_splits(counts=TINY, seed=3)
    cfg = TrainConfig(phase1_epochs=1, phase2_epochs=1, batch_size=14, seed=5)
    res = run_curriculum(cfg, dataset=ds)
    return ds, cfg, res


@pytest.fixture()
def saved(trained, tmp_path):
    ds, cfg, res = trained
    rng = np.random.default_rng(11)
    rng.standard_normal(5)            # advance so the state is nontrivial
    ck = make_checkpoint(res.model, res.vocab, cfg, res.mean, res.std,
                         metric_history=res.val_scores,
                         loss_csv="step,total\n0,1.5\n", rng=rng)
    path = tmp_path / "model.ckpt"
    save_checkpoint(ck, path)
    return ds, cfg, res, ck, path


def test_roundtrip_bitwise(saved):
    _, _, _, ck, path = saved
    back = load_checkpoint(path)
    assert back.config == ck.config
    assert back.vit == ck.vit
    assert back.vocab_lines == ck.vocab_lines
    assert back.loss_csv == ck.loss_csv
    assert back.rng_state == ck.rng_state
    assert set(back.params) == set(ck.params)
    for name in ck.params:
        assert np.array_equal(back.params[name], ck.params[name]), name
    np.testing.assert_array_equal(back.channel_mean, ck.channel_mean)


def test_probe_batch_forward_identical(saved):
    ds, _, res, _, path = saved
    model2, vocab2, _, _, _ = restore_model(load_checkpoint(path))
    probe = ds.splits["test"][:4]
    imgs = np.stack([s.image for s in probe])
    ids, valid = encode_descriptions(vocab2, probe, model2.cfg.text_max_len)
    a = res.model.embed(imgs, ids, valid, gate_mode="predicted")
    b = model2.embed(imgs, ids, valid, gate_mode="predicted")
    assert np.array_equal(a, b)


def test_single_flipped_byte_detected(saved):
    _, _, _, _, path = saved
    raw = bytearray(path.read_bytes())
    for pos in (100, len(raw) // 2, len(raw) - 7):
        bad = bytearray(raw)
        bad[pos] ^= 0x01
        target = path.with_name("bad.ckpt")
        target.write_bytes(bytes(bad))
        with pytest.raises(CheckpointError):
            load_checkpoint(target)


def test_version_mismatch_names_migration(saved, tmp_path):
    _, _, _, _, path = saved
    raw = path.read_bytes()
    head, rest = raw.split(b"\n", 1)
    bad = tmp_path / "future.ckpt"
    bad.write_bytes(b"ROPEJEPA-CKPT 99\n" + rest)
    with pytest.raises(CheckpointError, match="migration"):
        load_checkpoint(bad)


def test_not_a_checkpoint(tmp_path):
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"\x89PNG\r\n\x1a\nnope")
    with pytest.raises(CheckpointError):
        load_checkpoint(junk)


def test_vit_mismatch_names_field(saved):
    _, _, _, ck, _ = saved
    other = VitConfig(depth=6)
    with pytest.raises(CheckpointError, match="depth"):
        check_vit_compatible(ck, other)
    with pytest.raises(CheckpointError, match="depth"):
        restore_model(ck, expect_vit=other)


def test_optimizer_state_travels(trained, tmp_path):
    ds, cfg, res = trained
    opt = AdamW(res.model.named_parameters(), parameter_groups(res.model))
    for p in opt.params.values():
        p.grad = np.ones_like(p.data)
    opt.step({"backbone": 1e-4, "head": 1e-4})
    ck = make_checkpoint(res.model, res.vocab, cfg, res.mean, res.std,
                         opt_state=opt.state_arrays())
    path = tmp_path / "with_opt.ckpt"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    opt2 = AdamW(res.model.named_parameters(), parameter_groups(res.model))
    opt2.load_state_arrays(back.opt_state)
    assert opt2.t == opt.t
    for n in opt.m:
        np.testing.assert_array_equal(opt2.m[n], opt.m[n])


def test_restore_rejects_renamed_params(saved):
    _, _, _, ck, _ = saved
    mangled = dict(ck.params)
    some = sorted(mangled)[0]
    mangled["zz." + some] = mangled.pop(some)
    broken = dataclasses.replace(ck, params=mangled)
    with pytest.raises(CheckpointError, match="parameter names"):
        restore_model(broken)


# --- config files -----------------------------------------------------------

def test_config_text_roundtrip():
    cfg = TrainConfig(seed=77, ablation="E3", phase1_full_cdd=True,
                      lr_head=1.5e-4)
    back = config_from_dict(parse_config_text(format_config(cfg)))
    assert back == cfg


def test_config_comments_and_blanks():
    d = parse_config_text("# a comment\n\nseed = 9   # trailing\nablation = E2\n")
    assert d == {"seed": 9, "ablation": "E2"}


def test_config_unknown_key_lists_valid():
    with pytest.raises(CheckpointError, match="learning_rate"):
        parse_config_text("learning_rate = 3")


def test_config_bad_syntax():
    with pytest.raises(CheckpointError, match="key = value"):
        parse_config_text("just some words\n")


def test_config_bool_coercion():
    assert parse_config_text("phase1_full_cdd = true")["phase1_full_cdd"] is True
    assert parse_config_text("phase1_full_cdd = False")["phase1_full_cdd"] is False
    with pytest.raises(CheckpointError):
        parse_config_text("phase1_full_cdd = maybe")


def test_config_dict_rejects_unknown():
    with pytest.raises(CheckpointError):
        config_from_dict({"seed": 1, "warp_factor": 9})


def test_config_hash_stable_and_sensitive():
    a = config_hash(TrainConfig(seed=1))
    b = config_hash(TrainConfig(seed=1))
    c = config_hash(TrainConfig(seed=2))
    assert a == b and a != c


# --- manifests --------------------------------------------------------------

def test_manifest_roundtrip(tmp_path):
    cfg = TrainConfig(seed=4)
    m = new_manifest("train", cfg)
    m.add_output("runs/x/final.ckpt")
    m.add_output("runs/x/log.csv")
    path = m.write(tmp_path)
    back = RunManifest.from_json(path.read_text())
    assert back == m
    assert back.outputs == ["runs/x/final.ckpt", "runs/x/log.csv"]
    assert back.config_hash == config_hash(cfg)


def test_code_fingerprint_is_stable():
    assert code_fingerprint() == code_fingerprint()


def test_code_fingerprint_tracks_content(tmp_path):
    (tmp_path / "a.py").write_text("x = 1\n")
    f1 = code_fingerprint(tmp_path)
    (tmp_path / "a.py").write_text("x = 2\n")
    assert code_fingerprint(tmp_path) != f1


def test_run_dir_name_shape():
    cfg = TrainConfig(seed=3)
    name = run_dir_name(cfg, now=1_700_000_000.0)
    stamp, h = name.rsplit("-", 1)
    assert h == config_hash(cfg)
    assert len(stamp.split("-")[0]) == 8   # YYYYMMDD
