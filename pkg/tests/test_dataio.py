"""Dataset file formats: round trips, determinism, and malformed-input diagnostics."""

import numpy as np
import pytest

from hact.dataio import (
    read_crop_rects,
    read_dataset,
    read_hfrm,
    read_labels,
    read_pgm,
    read_pgm_clip,
    read_skeletons,
    write_crop_rects,
    write_dataset,
    write_hfrm,
    write_labels,
    write_pgm,
    write_pgm_clip,
    write_skeletons,
)
from hact.errors import DataError
from hact.preprocess import CropRect
from hact.synthetic import SyntheticSpec, generate_synthetic


def tiny_dataset(**kw):
    base = dict(
        n_classes=4,
        n_families=2,
        clips_per_class=2,
        frame_h=48,
        frame_w=64,
        clip_len=8,
        n_joints=4,
        clutter=0.5,
        offset_range=0.2,
        test_fraction=0.5,
        seed=0,
    )
    base.update(kw)
    return generate_synthetic(SyntheticSpec(**base))


def rng(seed):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# HFRM container
# ---------------------------------------------------------------------------


def test_hfrm_round_trip(tmp_path):
    frames = rng(0).integers(0, 256, size=(5, 7, 9), dtype=np.uint8)
    path = tmp_path / "clip.hfrm"
    write_hfrm(path, frames)
    back = read_hfrm(path)
    assert back.dtype == np.uint8
    np.testing.assert_array_equal(back, frames)


def test_hfrm_layout_is_magic_version_dims_payload(tmp_path):
    frames = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    path = tmp_path / "clip.hfrm"
    write_hfrm(path, frames)
    blob = path.read_bytes()
    assert blob[:4] == b"HFRM"
    assert blob[4] == 1
    assert blob[5:17] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little") + (4).to_bytes(4, "little")
    assert blob[17:] == frames.tobytes()


def test_hfrm_rejects_bad_inputs(tmp_path):
    with pytest.raises(DataError, match="uint8"):
        write_hfrm(tmp_path / "x.hfrm", np.zeros((2, 3, 4)))
    with pytest.raises(DataError, match=r"\[T,H,W\]"):
        write_hfrm(tmp_path / "x.hfrm", np.zeros((3, 4), dtype=np.uint8))


def test_hfrm_truncation_names_offset(tmp_path):
    frames = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    path = tmp_path / "clip.hfrm"
    write_hfrm(path, frames)
    blob = path.read_bytes()

    short = tmp_path / "short.hfrm"
    short.write_bytes(blob[:20])
    with pytest.raises(DataError, match="truncated at offset 20"):
        read_hfrm(short)

    headerless = tmp_path / "headerless.hfrm"
    headerless.write_bytes(blob[:9])
    with pytest.raises(DataError, match="truncated at offset 9"):
        read_hfrm(headerless)


def test_hfrm_rejects_bad_magic_version_and_trailing(tmp_path):
    frames = np.zeros((1, 2, 2), dtype=np.uint8)
    path = tmp_path / "clip.hfrm"
    write_hfrm(path, frames)
    blob = path.read_bytes()

    bad_magic = tmp_path / "bad_magic.hfrm"
    bad_magic.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(DataError, match="bad magic"):
        read_hfrm(bad_magic)

    bad_version = tmp_path / "bad_version.hfrm"
    bad_version.write_bytes(blob[:4] + bytes([9]) + blob[5:])
    with pytest.raises(DataError, match="version 9"):
        read_hfrm(bad_version)

    trailing = tmp_path / "trailing.hfrm"
    trailing.write_bytes(blob + b"xx")
    with pytest.raises(DataError, match="2 trailing bytes"):
        read_hfrm(trailing)


# ---------------------------------------------------------------------------
# Portable graymaps
# ---------------------------------------------------------------------------


def test_pgm_round_trip(tmp_path):
    frame = rng(1).integers(0, 256, size=(6, 11), dtype=np.uint8)
    path = tmp_path / "f.pgm"
    write_pgm(path, frame)
    np.testing.assert_array_equal(read_pgm(path), frame)
    assert path.read_bytes().startswith(b"P5\n11 6\n255\n")


def test_pgm_reader_skips_header_comments(tmp_path):
    frame = np.arange(6, dtype=np.uint8).reshape(2, 3)
    path = tmp_path / "f.pgm"
    path.write_bytes(b"P5\n# a comment\n3 2\n255\n" + frame.tobytes())
    np.testing.assert_array_equal(read_pgm(path), frame)


def test_pgm_rejects_malformed(tmp_path):
    good = b"P5\n3 2\n255\n" + bytes(6)
    p = tmp_path / "f.pgm"

    p.write_bytes(b"P6" + good[2:])
    with pytest.raises(DataError, match="P5"):
        read_pgm(p)

    p.write_bytes(b"P5\n3 2\n65535\n" + bytes(12))
    with pytest.raises(DataError, match="maxval 255"):
        read_pgm(p)

    p.write_bytes(good[:-2])
    with pytest.raises(DataError, match="expected 6 pixel bytes"):
        read_pgm(p)

    p.write_bytes(b"P5\n3 two\n255\n" + bytes(6))
    with pytest.raises(DataError, match="non-numeric"):
        read_pgm(p)


def test_pgm_clip_round_trip_and_order(tmp_path):
    frames = rng(2).integers(0, 256, size=(12, 4, 5), dtype=np.uint8)
    clip_dir = tmp_path / "clip"
    write_pgm_clip(clip_dir, frames)
    assert sorted(p.name for p in clip_dir.iterdir())[0] == "f0000.pgm"
    np.testing.assert_array_equal(read_pgm_clip(clip_dir), frames)


def test_pgm_clip_rejects_empty_and_mixed_sizes(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(DataError, match="no f"):
        read_pgm_clip(empty)

    mixed = tmp_path / "mixed"
    mixed.mkdir()
    write_pgm(mixed / "f0000.pgm", np.zeros((2, 3), dtype=np.uint8))
    write_pgm(mixed / "f0001.pgm", np.zeros((3, 2), dtype=np.uint8))
    with pytest.raises(DataError, match="disagree"):
        read_pgm_clip(mixed)


# ---------------------------------------------------------------------------
# Skeleton text files
# ---------------------------------------------------------------------------


def awkward_skeleton(t, j, d, seed):
    """Coordinates that stress float round-tripping (tiny, huge, negative)."""
    vals = rng(seed).normal(size=(t, j, d))
    vals[0, 0, 0] = 0.1
    vals[-1, -1, -1] = -1.0 / 3.0
    if t > 1:
        vals[1, 0, 0] = 1e-17
        vals[1, 0, 1] = -12345678.987654321
    return vals


def test_skeletons_round_trip_bit_exact(tmp_path):
    items = {
        "a": awkward_skeleton(4, 3, 2, 10),
        "b": awkward_skeleton(2, 3, 2, 11),
    }
    path = tmp_path / "skeletons_2d.txt"
    write_skeletons(path, items.items(), n_dims=2)
    back = read_skeletons(path)
    assert set(back) == {"a", "b"}
    for cid in items:
        assert back[cid].dtype == np.float64
        assert back[cid].tobytes() == items[cid].tobytes()


def test_skeletons_line_layout(tmp_path):
    path = tmp_path / "s.txt"
    write_skeletons(path, [("c0", np.zeros((1, 2, 3)))], n_dims=3)
    line = path.read_text().splitlines()[0].split()
    assert line[:3] == ["c0", "0", "2"]
    assert len(line) == 3 + 6


def test_skeletons_infer_dims_and_force_dims(tmp_path):
    p2 = tmp_path / "s2.txt"
    write_skeletons(p2, [("c", np.ones((2, 4, 2)))], n_dims=2)
    assert read_skeletons(p2)["c"].shape == (2, 4, 2)
    assert read_skeletons(p2, n_dims=2)["c"].shape == (2, 4, 2)
    with pytest.raises(DataError, match="12 coordinates for 3-d, got 8"):
        read_skeletons(p2, n_dims=3)

    p3 = tmp_path / "s3.txt"
    write_skeletons(p3, [("c", np.ones((2, 4, 3)))], n_dims=3)
    assert read_skeletons(p3)["c"].shape == (2, 4, 3)


def test_skeletons_interleaved_clips_allowed(tmp_path):
    path = tmp_path / "s.txt"
    path.write_text(
        "a 0 2 1.0 2.0 3.0 4.0\n"
        "b 0 2 5.0 6.0 7.0 8.0\n"
        "\n"
        "# trailing comment lines are fine\n"
        "a 1 2 1.5 2.5 3.5 4.5\n"
    )
    back = read_skeletons(path, n_dims=2)
    assert back["a"].shape == (2, 2, 2)
    assert back["b"].shape == (1, 2, 2)
    assert back["a"][1, 1, 1] == 4.5


def test_skeletons_malformed_lines_name_file_and_line(tmp_path):
    path = tmp_path / "s.txt"

    path.write_text("a 0 2 1 2 3 4\na zero 2 1 2 3 4\n")
    with pytest.raises(DataError, match=r"s\.txt:2: frame index"):
        read_skeletons(path)

    path.write_text("a 0 2 1 2 3 4\na 2 2 1 2 3 4\n")
    with pytest.raises(DataError, match=r"s\.txt:2: .*expected frame 1, got 2"):
        read_skeletons(path)

    path.write_text("a 0 2 1 2 3 4\na 1 3 1 2 3 4 5 6\n")
    with pytest.raises(DataError, match=r"s\.txt:2: .*joint count"):
        read_skeletons(path)

    path.write_text("a 0 2 1 2 3 x\n")
    with pytest.raises(DataError, match=r"s\.txt:1: non-numeric"):
        read_skeletons(path)

    path.write_text("a 0 2 1 2 3\n")
    with pytest.raises(DataError, match=r"s\.txt:1: 2 joints need 4 or 6"):
        read_skeletons(path)

    path.write_text("a 0 2 1 2 3 4\na 1 2 1 2 3 4 5 6\n")
    with pytest.raises(DataError, match=r"s\.txt:2: .*switches from 2-d to 3-d"):
        read_skeletons(path)

    path.write_text("a 0 0\n")
    with pytest.raises(DataError, match=r"s\.txt:1: joint count must be positive"):
        read_skeletons(path)


# ---------------------------------------------------------------------------
# Labels and crop rects
# ---------------------------------------------------------------------------


def test_labels_round_trip(tmp_path):
    path = tmp_path / "labels.csv"
    rows = [("c00", 0, "train"), ("c01", 3, "test")]
    write_labels(path, rows)
    assert read_labels(path) == rows
    assert path.read_text().splitlines()[0] == "clip_id,label,split"


def test_labels_diagnostics(tmp_path):
    path = tmp_path / "labels.csv"

    path.write_text("clip,lab,spl\n")
    with pytest.raises(DataError, match=r"labels\.csv:1: expected header"):
        read_labels(path)

    path.write_text("clip_id,label,split\nc0,zero,train\n")
    with pytest.raises(DataError, match=":2: non-integer label"):
        read_labels(path)

    path.write_text("clip_id,label,split\nc0,-1,train\n")
    with pytest.raises(DataError, match=":2: negative label"):
        read_labels(path)

    path.write_text("clip_id,label,split\nc0,0,val\n")
    with pytest.raises(DataError, match=":2: split must be one of"):
        read_labels(path)

    path.write_text("clip_id,label,split\nc0,0,train\nc0,1,test\n")
    with pytest.raises(DataError, match=":3: duplicate clip id"):
        read_labels(path)

    path.write_text("clip_id,label,split\n")
    with pytest.raises(DataError, match="no labelled clips"):
        read_labels(path)


def test_crop_rects_round_trip(tmp_path):
    path = tmp_path / "rects.csv"
    rects = {"a": CropRect(1, 2, 10, 20), "b": CropRect(0, 0, 64, 48)}
    write_crop_rects(path, rects)
    assert read_crop_rects(path) == rects
    with pytest.raises(DataError, match=":3: non-integer"):
        path.write_text("clip_id,x0,y0,x1,y1\na,1,2,3,4\nb,1,2,3,x\n")
        read_crop_rects(path)


# ---------------------------------------------------------------------------
# Whole-dataset round trip
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("frame_format", ["hfrm", "pgm"])
def test_dataset_round_trip(tmp_path, frame_format):
    ds = tiny_dataset()
    root = tmp_path / "ds"
    write_dataset(ds, root, frame_format=frame_format)
    back = read_dataset(root)

    assert back.spec == ds.spec
    assert back.params == ds.params
    np.testing.assert_array_equal(back.family_of_class, ds.family_of_class)
    assert len(back.clips) == len(ds.clips)
    for orig, readed in zip(ds.clips, back.clips):
        assert readed.clip_id == orig.clip_id
        assert readed.label == orig.label
        assert readed.split == orig.split
        np.testing.assert_array_equal(readed.frames, orig.frames)
        assert readed.skeleton2d.tobytes() == orig.skeleton2d.tobytes()
        assert readed.skeleton3d.tobytes() == orig.skeleton3d.tobytes()
        assert readed.depth == orig.depth


def test_dataset_writes_are_deterministic(tmp_path):
    ds = tiny_dataset()
    a, b = tmp_path / "a", tmp_path / "b"
    write_dataset(ds, a)
    write_dataset(ds, b)
    for rel in ("meta.txt", "labels.csv", "skeletons_2d.txt", "skeletons_3d.txt"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
    for fa in sorted((a / "frames").iterdir()):
        assert fa.read_bytes() == (b / "frames" / fa.name).read_bytes()


def test_read_dataset_diagnostics(tmp_path):
    ds = tiny_dataset()
    root = tmp_path / "ds"
    write_dataset(ds, root)

    missing = tmp_path / "nowhere"
    with pytest.raises(DataError, match="meta.txt"):
        read_dataset(missing)

    victim = root / "frames" / f"{ds.clips[0].clip_id}.hfrm"
    victim.unlink()
    with pytest.raises(DataError, match="missing frames"):
        read_dataset(root)
    write_hfrm(victim, ds.clips[0].frames)

    skel = root / "skeletons_2d.txt"
    lines = skel.read_text().splitlines()
    skel.write_text("\n".join(lines[1:]) + "\n")
    with pytest.raises(DataError, match="expected frame 0, got 1"):
        read_dataset(root)


def test_read_dataset_rejects_label_outside_meta_classes(tmp_path):
    ds = tiny_dataset()
    root = tmp_path / "ds"
    write_dataset(ds, root)
    labels = root / "labels.csv"
    text = labels.read_text().replace(f",{ds.spec.n_classes - 1},", ",9,")
    labels.write_text(text)
    with pytest.raises(DataError, match="label 9"):
        read_dataset(root)


def test_read_dataset_rejects_orphan_skeletons(tmp_path):
    ds = tiny_dataset()
    root = tmp_path / "ds"
    write_dataset(ds, root)
    with open(root / "skeletons_2d.txt", "a", encoding="ascii") as fh:
        fh.write("ghost 0 2 1.0 2.0 3.0 4.0\n")
    with pytest.raises(DataError, match="unlabelled clips: ghost"):
        read_dataset(root)


def test_meta_diagnostics(tmp_path):
    ds = tiny_dataset()
    root = tmp_path / "ds"
    write_dataset(ds, root)
    meta = root / "meta.txt"
    good = meta.read_text()

    meta.write_text(good + "mystery_knob=3\n")
    with pytest.raises(DataError, match="unknown key 'mystery_knob'"):
        read_dataset(root)

    meta.write_text(good.replace("n_joints=4\n", ""))
    with pytest.raises(DataError, match="missing keys: n_joints"):
        read_dataset(root)

    meta.write_text(good.replace("format_version=1", "format_version=2"))
    with pytest.raises(DataError, match="format_version"):
        read_dataset(root)

    meta.write_text(good + "n_joints=5\n")
    with pytest.raises(DataError, match="duplicate key 'n_joints'"):
        read_dataset(root)
