"""Checkpoint binary format: bit-exact round trips and corruption diagnostics."""

import struct

import numpy as np
import pytest

from hact.checkpoint import (
    Checkpoint,
    checkpoint_meta,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from hact.config import ExperimentConfig, parse_config
from hact.errors import CheckpointError
from hact.hierarchy import block_hierarchy
from hact.model import build_model
from hact.pruning import apply_mask
from hact.tensor import Tensor


def tiny_config():
    return parse_config(
        "data.n_classes=4\n"
        "data.n_families=2\n"
        "model.base_channels=4\n"
        "model.heads=2,2,4,4\n"
        "hierarchy.k_list=2,2,4\n"
    )


def tiny_model(cfg=None, seed=0):
    cfg = cfg or tiny_config()
    return build_model(cfg.stack_config(), seed=seed)


def perturb(model, seed=5):
    """Make parameters and buffers distinctive so defaults cannot pass."""
    r = np.random.default_rng(seed)
    for t in model.named_params().values():
        t.data += r.normal(scale=0.05, size=t.data.shape)
    for buf in model.named_buffers().values():
        buf += r.normal(scale=0.05, size=buf.shape)


def eval_logits(model, seed=9):
    x = Tensor(np.random.default_rng(seed).normal(size=(2, 1, 4, 8, 8)))
    return [l.data for l in model.forward(x, training=False)]


def test_round_trip_forward_bit_identical(tmp_path):
    cfg = tiny_config()
    model = tiny_model(cfg)
    perturb(model)
    model.is_trained = True
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, checkpoint_meta(cfg, block_hierarchy(4, (2, 2, 4))), path)
    loaded = model_from_checkpoint(load_checkpoint(path), path)
    assert loaded.is_trained is True
    for a, b in zip(eval_logits(model), eval_logits(loaded)):
        assert a.tobytes() == b.tobytes()


def test_round_trip_preserves_masks_and_dead_filters(tmp_path):
    cfg = tiny_config()
    model = tiny_model(cfg)
    perturb(model)
    name, conv, _bn = model.prunable_convs()[1]
    dead = np.zeros(conv.weight.data.shape[0], dtype=bool)
    dead[0] = True
    apply_mask(model, {name: dead})
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, checkpoint_meta(cfg, None), path)

    ckpt = load_checkpoint(path)
    np.testing.assert_array_equal(ckpt.masks[name], dead)
    loaded = model_from_checkpoint(ckpt, path)
    np.testing.assert_array_equal(loaded.masks[name], dead)
    lconv = dict((n, c) for n, c, _ in loaded.prunable_convs())[name]
    assert not lconv.weight.data[0].any()
    for a, b in zip(eval_logits(model), eval_logits(loaded)):
        assert a.tobytes() == b.tobytes()


def test_meta_carries_config_hierarchy_and_rng(tmp_path):
    cfg = tiny_config()
    hier = block_hierarchy(4, (2, 2, 4))
    model = tiny_model(cfg)
    save_checkpoint(model, checkpoint_meta(cfg, hier, {"note": "x"}), tmp_path / "m.ckpt")
    meta = load_checkpoint(tmp_path / "m.ckpt").meta
    assert meta["hierarchy"] == hier.to_text()
    assert meta["note"] == "x"
    assert meta["is_trained"] is False
    assert meta["rng"]["train_seed"] == cfg.train.seed
    snap = parse_config(meta["config"])
    assert snap.model.heads == (2, 2, 4, 4)  # resolved explicitly in the snapshot


def test_checkpoint_is_self_sufficient_without_original_config(tmp_path):
    # Heads left empty in the config must be resolved inside the snapshot.
    cfg = parse_config("data.n_classes=4\ndata.n_families=2\nmodel.base_channels=4\nhierarchy.k_list=2,2,4\n")
    model = build_model(cfg.stack_config(), seed=1)
    perturb(model)
    save_checkpoint(model, checkpoint_meta(cfg, None), tmp_path / "m.ckpt")
    loaded = model_from_checkpoint(load_checkpoint(tmp_path / "m.ckpt"))
    assert [h.weight.data.shape for h in loaded.heads] == [
        h.weight.data.shape for h in model.heads
    ]


def test_save_is_deterministic(tmp_path):
    cfg = tiny_config()
    model = tiny_model(cfg)
    perturb(model)
    save_checkpoint(model, checkpoint_meta(cfg, None), tmp_path / "a.ckpt")
    save_checkpoint(model, checkpoint_meta(cfg, None), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_truncation_names_offset_everywhere(tmp_path):
    cfg = tiny_config()
    model = tiny_model(cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, checkpoint_meta(cfg, None), path)
    blob = path.read_bytes()

    # Chop at several structurally distinct places: magic, version, meta,
    # array count, array header, payload, and one byte short of the end.
    for cut in (2, 4, 7, 40, len(blob) // 2, len(blob) - 1):
        clipped = tmp_path / "cut.ckpt"
        clipped.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError, match=f"truncated at offset {cut}"):
            load_checkpoint(clipped)


def test_corruption_diagnostics(tmp_path):
    cfg = tiny_config()
    model = tiny_model(cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, checkpoint_meta(cfg, None), path)
    blob = path.read_bytes()

    bad = tmp_path / "bad.ckpt"

    bad.write_bytes(b"HAXX" + blob[4:])
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(bad)

    bad.write_bytes(blob[:4] + bytes([7]) + blob[5:])
    with pytest.raises(CheckpointError, match="version 7 at offset 4"):
        load_checkpoint(bad)

    meta_len = struct.unpack("<I", blob[5:9])[0]
    bad.write_bytes(blob[:9] + b"{" * meta_len + blob[9 + meta_len :])
    with pytest.raises(CheckpointError, match="corrupt meta JSON at offset 9"):
        load_checkpoint(bad)

    bad.write_bytes(blob + b"\x00")
    with pytest.raises(CheckpointError, match="1 trailing bytes"):
        load_checkpoint(bad)


def test_missing_and_extra_arrays_are_rejected(tmp_path):
    cfg = tiny_config()
    model = tiny_model(cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, checkpoint_meta(cfg, None), path)
    ckpt = load_checkpoint(path)

    stolen = dict(ckpt.arrays)
    victim = sorted(stolen)[0]
    del stolen[victim]
    with pytest.raises(CheckpointError, match=f"missing arrays: {victim}"):
        model_from_checkpoint(Checkpoint(1, ckpt.meta, stolen, {}))

    padded = dict(ckpt.arrays)
    padded["stowaway"] = np.zeros(3)
    with pytest.raises(CheckpointError, match="unexpected arrays: stowaway"):
        model_from_checkpoint(Checkpoint(1, ckpt.meta, padded, {}))


def test_shape_mismatch_and_bad_masks_are_rejected(tmp_path):
    cfg = tiny_config()
    model = tiny_model(cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, checkpoint_meta(cfg, None), path)
    ckpt = load_checkpoint(path)

    warped = dict(ckpt.arrays)
    name = sorted(warped)[0]
    warped[name] = np.zeros(warped[name].size + 1)
    with pytest.raises(CheckpointError, match=f"array '{name}' has shape"):
        model_from_checkpoint(Checkpoint(1, ckpt.meta, warped, {}))

    with pytest.raises(CheckpointError, match="unknown convolution"):
        model_from_checkpoint(
            Checkpoint(1, ckpt.meta, dict(ckpt.arrays), {"nope": np.ones(2, dtype=bool)})
        )

    real = model.prunable_convs()[0][0]
    with pytest.raises(CheckpointError, match="mask .* has shape"):
        model_from_checkpoint(
            Checkpoint(1, ckpt.meta, dict(ckpt.arrays), {real: np.ones(99, dtype=bool)})
        )


def test_meta_must_contain_config():
    with pytest.raises(CheckpointError, match="lacks the 'config'"):
        model_from_checkpoint(Checkpoint(1, {"is_trained": False}, {}, {}))


def test_missing_file_is_a_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read checkpoint"):
        load_checkpoint(tmp_path / "absent.ckpt")
