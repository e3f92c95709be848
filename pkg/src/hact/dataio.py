"""On-disk dataset formats: frames, skeletons, labels, and metadata.

A dataset directory holds::

    meta.txt            key=value description (frame size, projection, families)
    labels.csv          clip_id,label,split
    skeletons_2d.txt    one line per frame: clip_id frame_idx J then 2J numbers
    skeletons_3d.txt    one line per frame: clip_id frame_idx J then 3J numbers
    frames/             one ``<clip_id>.hfrm`` container per clip, or one
                        ``<clip_id>/`` directory of binary portable graymaps

Frames avoid video codecs entirely: the ``HFRM`` container is a raw uint8
tensor with a fixed little-endian header, and the portable-graymap (``P5``)
alternative keeps every frame inspectable with stock image viewers.  All
text is plain ASCII; floats are written with ``repr`` so a read back is
bit-exact.  Malformed input is reported as ``path:line: problem``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .preprocess import CropRect, ProjectionParams
from .synthetic import SyntheticClip, SyntheticDataset, SyntheticSpec

HFRM_MAGIC = b"HFRM"
HFRM_VERSION = 1

LABELS_HEADER = "clip_id,label,split"
CROP_RECTS_HEADER = "clip_id,x0,y0,x1,y1"

_SPLITS = ("train", "test")


# ---------------------------------------------------------------------------
# HFRM raw tensor container
# ---------------------------------------------------------------------------


def write_hfrm(path, frames: np.ndarray) -> None:
    """Write a ``[T,H,W]`` uint8 clip as magic + version + LE dims + payload."""
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise DataError(f"clip frames must be [T,H,W], got shape {frames.shape}")
    if frames.dtype != np.uint8:
        raise DataError(f"clip frames must be uint8, got {frames.dtype}")
    t, h, w = frames.shape
    with open(path, "wb") as fh:
        fh.write(HFRM_MAGIC)
        fh.write(bytes([HFRM_VERSION]))
        fh.write(struct.pack("<III", t, h, w))
        fh.write(frames.tobytes())


def read_hfrm(path) -> np.ndarray:
    """Read a clip written by :func:`write_hfrm`, validating every prefix."""
    blob = Path(path).read_bytes()
    if blob[:4] != HFRM_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r} at offset 0, expected {HFRM_MAGIC!r}")
    if len(blob) < 5:
        raise DataError(f"{path}: truncated at offset {len(blob)}, expected version byte")
    if blob[4] != HFRM_VERSION:
        raise DataError(
            f"{path}: unsupported container version {blob[4]} at offset 4, "
            f"expected {HFRM_VERSION}"
        )
    if len(blob) < 17:
        raise DataError(f"{path}: truncated at offset {len(blob)}, expected 12-byte dims at offset 5")
    t, h, w = struct.unpack("<III", blob[5:17])
    need = 17 + t * h * w
    if len(blob) < need:
        raise DataError(
            f"{path}: truncated at offset {len(blob)}, payload for [{t},{h},{w}] "
            f"ends at offset {need}"
        )
    if len(blob) > need:
        raise DataError(f"{path}: {len(blob) - need} trailing bytes after offset {need}")
    return np.frombuffer(blob, dtype=np.uint8, offset=17).reshape(t, h, w).copy()


# ---------------------------------------------------------------------------
# Portable graymap (binary P5) frames
# ---------------------------------------------------------------------------


def write_pgm(path, frame: np.ndarray) -> None:
    frame = np.asarray(frame)
    if frame.ndim != 2 or frame.dtype != np.uint8:
        raise DataError(f"a graymap frame must be [H,W] uint8, got {frame.dtype} {frame.shape}")
    h, w = frame.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(frame.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    # Header = 4 whitespace-separated tokens (magic, width, height, maxval);
    # '#' comments run to end of line, and one whitespace byte ends the header.
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated graymap header at offset {pos}")
        fields.append(blob[start:pos])
    pos += 1  # single whitespace byte after maxval, then raw pixels
    if fields[0] != b"P5":
        raise DataError(f"{path}: expected binary graymap magic P5, got {fields[0]!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise DataError(f"{path}: non-numeric graymap header fields {fields[1:]}") from None
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 graymaps are supported, got {maxval}")
    if len(blob) - pos != w * h:
        raise DataError(
            f"{path}: expected {w * h} pixel bytes at offset {pos}, found {len(blob) - pos}"
        )
    return np.frombuffer(blob, dtype=np.uint8, offset=pos).reshape(h, w).copy()


def write_pgm_clip(clip_dir, frames: np.ndarray) -> None:
    clip_dir = Path(clip_dir)
    clip_dir.mkdir(parents=True, exist_ok=True)
    for t in range(frames.shape[0]):
        write_pgm(clip_dir / f"f{t:04d}.pgm", frames[t])


def read_pgm_clip(clip_dir) -> np.ndarray:
    clip_dir = Path(clip_dir)
    paths = sorted(clip_dir.glob("f*.pgm"))
    if not paths:
        raise DataError(f"{clip_dir}: no f*.pgm frames found")
    frames = [read_pgm(p) for p in paths]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise DataError(f"{clip_dir}: frames disagree on size: {sorted(shapes)}")
    return np.stack(frames)


# ---------------------------------------------------------------------------
# Skeleton text files
# ---------------------------------------------------------------------------


def write_skeletons(path, items, n_dims: int) -> None:
    """Write ``(clip_id, [T,J,n_dims])`` pairs, one frame per line.

    Line layout: ``clip_id frame_idx J`` then ``n_dims * J`` coordinates in
    joint order.  Floats use ``repr`` so parsing reproduces them bit-exactly.
    """
    if n_dims not in (2, 3):
        raise DataError(f"skeletons are 2-d or 3-d, got {n_dims}")
    with open(path, "w", encoding="ascii") as fh:
        for clip_id, joints in items:
            joints = np.asarray(joints, dtype=np.float64)
            if joints.ndim != 3 or joints.shape[2] != n_dims:
                raise DataError(
                    f"skeleton for {clip_id!r} must be [T,J,{n_dims}], got shape {joints.shape}"
                )
            n_joints = joints.shape[1]
            for t in range(joints.shape[0]):
                coords = " ".join(repr(float(v)) for v in joints[t].reshape(-1))
                fh.write(f"{clip_id} {t} {n_joints} {coords}\n")


def read_skeletons(path, n_dims: int | None = None) -> dict[str, np.ndarray]:
    """Parse a skeleton file into ``{clip_id: [T,J,D]}``.

    ``n_dims`` forces 2 or 3; left as None it is inferred per line from the
    coordinate count.  Frames of a clip must appear in order 0,1,2,...
    though clips may interleave.
    """
    if n_dims not in (None, 2, 3):
        raise DataError(f"skeletons are 2-d or 3-d, got {n_dims}")
    rows: dict[str, list[np.ndarray]] = {}
    dims: dict[str, int] = {}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 3:
                raise DataError(
                    f"{path}:{lineno}: expected 'clip_id frame_idx J coords...', "
                    f"got {len(parts)} fields"
                )
            clip_id = parts[0]
            try:
                frame_idx = int(parts[1])
                n_joints = int(parts[2])
            except ValueError:
                raise DataError(
                    f"{path}:{lineno}: frame index and joint count must be integers, "
                    f"got {parts[1]!r} {parts[2]!r}"
                ) from None
            if n_joints < 1:
                raise DataError(f"{path}:{lineno}: joint count must be positive, got {n_joints}")
            n_coords = len(parts) - 3
            if n_dims is not None:
                d = n_dims
                if n_coords != d * n_joints:
                    raise DataError(
                        f"{path}:{lineno}: {n_joints} joints need {d * n_joints} "
                        f"coordinates for {d}-d, got {n_coords}"
                    )
            elif n_coords == 2 * n_joints:
                d = 2
            elif n_coords == 3 * n_joints:
                d = 3
            else:
                raise DataError(
                    f"{path}:{lineno}: {n_joints} joints need {2 * n_joints} or "
                    f"{3 * n_joints} coordinates, got {n_coords}"
                )
            try:
                coords = np.array([float(v) for v in parts[3:]], dtype=np.float64)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric coordinate") from None
            expected_dim = dims.setdefault(clip_id, d)
            if d != expected_dim:
                raise DataError(
                    f"{path}:{lineno}: clip {clip_id!r} switches from "
                    f"{expected_dim}-d to {d}-d"
                )
            frames = rows.setdefault(clip_id, [])
            if frame_idx != len(frames):
                raise DataError(
                    f"{path}:{lineno}: clip {clip_id!r} expected frame {len(frames)}, "
                    f"got {frame_idx}"
                )
            if frames and frames[0].shape[0] != n_joints:
                raise DataError(
                    f"{path}:{lineno}: clip {clip_id!r} changes joint count from "
                    f"{frames[0].shape[0]} to {n_joints}"
                )
            frames.append(coords.reshape(n_joints, d))
    return {cid: np.stack(fr) for cid, fr in rows.items()}


# ---------------------------------------------------------------------------
# Labels and crop-rect CSVs
# ---------------------------------------------------------------------------


def write_labels(path, rows) -> None:
    """Write ``(clip_id, label, split)`` rows under the documented header."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(LABELS_HEADER + "\n")
        for clip_id, label, split in rows:
            fh.write(f"{clip_id},{int(label)},{split}\n")


def read_labels(path) -> list[tuple[str, int, str]]:
    out: list[tuple[str, int, str]] = []
    seen: set[str] = set()
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if lineno == 1:
                if line != LABELS_HEADER:
                    raise DataError(
                        f"{path}:1: expected header {LABELS_HEADER!r}, got {line!r}"
                    )
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
            clip_id, label_s, split = parts
            try:
                label = int(label_s)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer label {label_s!r}") from None
            if label < 0:
                raise DataError(f"{path}:{lineno}: negative label {label}")
            if split not in _SPLITS:
                raise DataError(
                    f"{path}:{lineno}: split must be one of {_SPLITS}, got {split!r}"
                )
            if clip_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate clip id {clip_id!r}")
            seen.add(clip_id)
            out.append((clip_id, label, split))
    if not out:
        raise DataError(f"{path}: no labelled clips")
    return out


def write_crop_rects(path, rects) -> None:
    """Write ``{clip_id: CropRect}`` as clip_id,x0,y0,x1,y1 rows."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(CROP_RECTS_HEADER + "\n")
        for clip_id, r in rects.items():
            fh.write(f"{clip_id},{r.x0},{r.y0},{r.x1},{r.y1}\n")


def read_crop_rects(path) -> dict[str, CropRect]:
    out: dict[str, CropRect] = {}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if lineno == 1:
                if line != CROP_RECTS_HEADER:
                    raise DataError(
                        f"{path}:1: expected header {CROP_RECTS_HEADER!r}, got {line!r}"
                    )
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            try:
                x0, y0, x1, y1 = (int(v) for v in parts[1:])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer rectangle edge") from None
            if parts[0] in out:
                raise DataError(f"{path}:{lineno}: duplicate clip id {parts[0]!r}")
            out[parts[0]] = CropRect(x0=x0, y0=y0, x1=x1, y1=y1)
    return out


# ---------------------------------------------------------------------------
# meta.txt
# ---------------------------------------------------------------------------

_META_SPEC_FIELDS = (
    "n_classes",
    "n_families",
    "clips_per_class",
    "frame_h",
    "frame_w",
    "clip_len",
    "n_joints",
    "seed",
)
_META_SPEC_FLOATS = ("clutter", "offset_range", "test_fraction")
_META_PROJ_FIELDS = ("c_x", "c_y", "b_x", "b_y")


def write_meta(path, dataset: SyntheticDataset, frame_format: str) -> None:
    spec, params = dataset.spec, dataset.params
    with open(path, "w", encoding="ascii") as fh:
        fh.write("format_version=1\n")
        fh.write(f"frame_format={frame_format}\n")
        for name in _META_SPEC_FIELDS:
            fh.write(f"{name}={getattr(spec, name)}\n")
        for name in _META_SPEC_FLOATS:
            fh.write(f"{name}={repr(getattr(spec, name))}\n")
        for name in _META_PROJ_FIELDS:
            fh.write(f"{name}={repr(getattr(params, name))}\n")
        families = ",".join(str(int(f)) for f in dataset.family_of_class)
        fh.write(f"family_of_class={families}\n")


def read_meta(path) -> tuple[SyntheticSpec, ProjectionParams, np.ndarray, str]:
    values: dict[str, str] = {}
    known = (
        {"format_version", "frame_format", "family_of_class"}
        | set(_META_SPEC_FIELDS)
        | set(_META_SPEC_FLOATS)
        | set(_META_PROJ_FIELDS)
    )
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if key not in known:
                raise DataError(f"{path}:{lineno}: unknown key {key!r}")
            if key in values:
                raise DataError(f"{path}:{lineno}: duplicate key {key!r}")
            values[key] = value.strip()
    missing = sorted(known - set(values))
    if missing:
        raise DataError(f"{path}: missing keys: {', '.join(missing)}")
    if values["format_version"] != "1":
        raise DataError(
            f"{path}: unsupported format_version {values['format_version']!r}"
        )
    frame_format = values["frame_format"]
    if frame_format not in ("hfrm", "pgm"):
        raise DataError(f"{path}: frame_format must be hfrm or pgm, got {frame_format!r}")

    def _int(key):
        try:
            return int(values[key])
        except ValueError:
            raise DataError(f"{path}: key {key!r} must be an integer, got {values[key]!r}") from None

    def _float(key):
        try:
            return float(values[key])
        except ValueError:
            raise DataError(f"{path}: key {key!r} must be a number, got {values[key]!r}") from None

    spec = SyntheticSpec(
        **{name: _int(name) for name in _META_SPEC_FIELDS},
        **{name: _float(name) for name in _META_SPEC_FLOATS},
    )
    params = ProjectionParams(**{name: _float(name) for name in _META_PROJ_FIELDS})
    try:
        family_of_class = np.array(
            [int(v) for v in values["family_of_class"].split(",")], dtype=np.int64
        )
    except ValueError:
        raise DataError(f"{path}: family_of_class must be a comma list of integers") from None
    if family_of_class.shape[0] != spec.n_classes:
        raise DataError(
            f"{path}: family_of_class lists {family_of_class.shape[0]} classes, "
            f"meta says {spec.n_classes}"
        )
    return spec, params, family_of_class, frame_format


# ---------------------------------------------------------------------------
# Whole-dataset read/write
# ---------------------------------------------------------------------------


def write_dataset(dataset: SyntheticDataset, root, frame_format: str = "hfrm") -> None:
    """Write every clip, skeleton, and label of ``dataset`` under ``root``."""
    if frame_format not in ("hfrm", "pgm"):
        raise DataError(f"frame_format must be hfrm or pgm, got {frame_format!r}")
    root = Path(root)
    frames_dir = root / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    write_meta(root / "meta.txt", dataset, frame_format)
    write_labels(root / "labels.csv", ((c.clip_id, c.label, c.split) for c in dataset.clips))
    write_skeletons(
        root / "skeletons_2d.txt",
        ((c.clip_id, c.skeleton2d) for c in dataset.clips),
        n_dims=2,
    )
    write_skeletons(
        root / "skeletons_3d.txt",
        ((c.clip_id, c.skeleton3d) for c in dataset.clips),
        n_dims=3,
    )
    for clip in dataset.clips:
        if frame_format == "hfrm":
            write_hfrm(frames_dir / f"{clip.clip_id}.hfrm", clip.frames)
        else:
            write_pgm_clip(frames_dir / clip.clip_id, clip.frames)


def read_dataset(root) -> SyntheticDataset:
    """Read a directory written by :func:`write_dataset`.

    Every labelled clip must have frames and both skeletons, with one
    skeleton frame per video frame; inconsistencies name the offending clip.
    """
    root = Path(root)
    meta_path = root / "meta.txt"
    if not meta_path.exists():
        raise DataError(f"{meta_path}: not found (is {root} a dataset directory?)")
    spec, params, family_of_class, frame_format = read_meta(meta_path)
    labels = read_labels(root / "labels.csv")
    skel2 = read_skeletons(root / "skeletons_2d.txt", n_dims=2)
    skel3 = read_skeletons(root / "skeletons_3d.txt", n_dims=3)
    clips = []
    for clip_id, label, split in labels:
        if label >= spec.n_classes:
            raise DataError(
                f"{root / 'labels.csv'}: clip {clip_id!r} has label {label} "
                f"but meta says {spec.n_classes} classes"
            )
        if frame_format == "hfrm":
            frame_path = root / "frames" / f"{clip_id}.hfrm"
            if not frame_path.exists():
                raise DataError(f"{frame_path}: missing frames for clip {clip_id!r}")
            frames = read_hfrm(frame_path)
        else:
            frame_path = root / "frames" / clip_id
            if not frame_path.is_dir():
                raise DataError(f"{frame_path}: missing frames for clip {clip_id!r}")
            frames = read_pgm_clip(frame_path)
        if clip_id not in skel2:
            raise DataError(f"{root / 'skeletons_2d.txt'}: no skeleton for clip {clip_id!r}")
        if clip_id not in skel3:
            raise DataError(f"{root / 'skeletons_3d.txt'}: no skeleton for clip {clip_id!r}")
        s2, s3 = skel2[clip_id], skel3[clip_id]
        if s2.shape[0] != frames.shape[0] or s3.shape[0] != frames.shape[0]:
            raise DataError(
                f"clip {clip_id!r}: {frames.shape[0]} frames but "
                f"{s2.shape[0]} 2-d and {s3.shape[0]} 3-d skeleton frames"
            )
        clips.append(
            SyntheticClip(
                clip_id=clip_id,
                label=label,
                split=split,
                frames=frames,
                skeleton2d=s2,
                skeleton3d=s3,
                depth=float(s3[0, 0, 2]),
            )
        )
    extra2 = sorted(set(skel2) - {c.clip_id for c in clips})
    if extra2:
        raise DataError(
            f"{root / 'skeletons_2d.txt'}: skeletons for unlabelled clips: "
            f"{', '.join(extra2[:5])}"
        )
    return SyntheticDataset(
        spec=spec, params=params, clips=clips, family_of_class=family_of_class
    )
