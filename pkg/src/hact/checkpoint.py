"""Versioned binary checkpoints: parameters, buffers, masks, and a config snapshot.

Layout (all integers little-endian)::

    magic  b"HACT"
    u8     format version (currently 1)
    u32    meta length, then that many bytes of UTF-8 JSON
    u32    array count
    per array:
        u32  name length, then that many ASCII bytes
        u8   dtype code (0 = float64, 1 = boolean stored as one byte each)
        u8   rank
        u32  per-axis extent
        raw  payload, row-major

Mask arrays are stored under ``mask:`` + the convolution's parameter prefix.
The JSON meta carries the experiment config snapshot (``config``), the
hierarchy as text (``hierarchy``), rng bookkeeping, and the trained flag, so
a checkpoint alone suffices to rebuild the model and re-run evaluation.
Any structural damage raises :class:`CheckpointError` naming the byte
offset where reading failed; nothing is ever loaded partially.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import format_config, parse_config
from .errors import CheckpointError
from .hierarchy import Hierarchy
from .model import Model, build_model

MAGIC = b"HACT"
VERSION = 1
MASK_PREFIX = "mask:"

_DTYPE_F64 = 0
_DTYPE_BOOL = 1


@dataclass
class Checkpoint:
    """A parsed checkpoint file; ``arrays`` excludes masks, which live apart."""

    version: int
    meta: dict
    arrays: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)


def _encode_array(name: str, arr: np.ndarray, code: int) -> bytes:
    payload = arr.astype("<f8" if code == _DTYPE_F64 else np.uint8).tobytes()
    head = struct.pack("<I", len(name)) + name.encode("ascii")
    head += bytes([code, arr.ndim])
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + payload


def save_checkpoint(model: Model, meta: dict, path) -> None:
    """Write ``model``'s parameters, buffers, and masks plus ``meta`` JSON."""
    entries: list[tuple[str, np.ndarray, int]] = []
    for name, tensor in model.named_params().items():
        entries.append((name, tensor.data, _DTYPE_F64))
    for name, buf in model.named_buffers().items():
        entries.append((name, buf, _DTYPE_F64))
    for name, mask in model.masks.items():
        entries.append((MASK_PREFIX + name, np.asarray(mask, dtype=bool), _DTYPE_BOOL))
    meta = dict(meta)
    meta["is_trained"] = bool(model.is_trained)
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr, code in entries:
            fh.write(_encode_array(name, arr, code))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"{self.path}: truncated at offset {len(self.blob)}, "
                f"expected {what} at offset {self.pos}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def load_checkpoint(path) -> Checkpoint:
    """Parse a checkpoint file, validating every length prefix."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    r = _Reader(blob, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    version = r.u8("version byte")
    if version != VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version} at offset 4, "
            f"expected {VERSION}"
        )
    meta_len = r.u32("meta length")
    meta_start = r.pos
    meta_blob = r.take(meta_len, f"{meta_len}-byte meta JSON")
    try:
        meta = json.loads(meta_blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt meta JSON at offset {meta_start}: {exc}") from None
    if not isinstance(meta, dict):
        raise CheckpointError(f"{path}: meta JSON at offset {meta_start} is not an object")
    n_arrays = r.u32("array count")
    arrays: dict[str, np.ndarray] = {}
    masks: dict[str, np.ndarray] = {}
    for i in range(n_arrays):
        name_len = r.u32(f"name length of array {i}")
        name_off = r.pos
        try:
            name = r.take(name_len, f"{name_len}-byte name of array {i}").decode("ascii")
        except UnicodeDecodeError:
            raise CheckpointError(
                f"{path}: non-ASCII array name at offset {name_off}"
            ) from None
        code = r.u8(f"dtype code of {name!r}")
        if code not in (_DTYPE_F64, _DTYPE_BOOL):
            raise CheckpointError(
                f"{path}: unknown dtype code {code} for {name!r} at offset {r.pos - 1}"
            )
        ndim = r.u8(f"rank of {name!r}")
        shape = tuple(r.u32(f"axis {d} of {name!r}") for d in range(ndim))
        count = 1
        for extent in shape:
            count *= extent
        itemsize = 8 if code == _DTYPE_F64 else 1
        payload = r.take(count * itemsize, f"{count}-element payload of {name!r}")
        if code == _DTYPE_F64:
            arr = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
        else:
            arr = np.frombuffer(payload, dtype=np.uint8).reshape(shape).astype(bool)
        target = masks if name.startswith(MASK_PREFIX) else arrays
        key = name[len(MASK_PREFIX) :] if name.startswith(MASK_PREFIX) else name
        if key in target:
            raise CheckpointError(f"{path}: duplicate array {name!r} at offset {name_off}")
        target[key] = arr
    if r.pos != len(blob):
        raise CheckpointError(
            f"{path}: {len(blob) - r.pos} trailing bytes after offset {r.pos}"
        )
    return Checkpoint(version=version, meta=meta, arrays=arrays, masks=masks)


def checkpoint_meta(config, hierarchy: Hierarchy | None, extra: dict | None = None) -> dict:
    """Standard meta payload: config snapshot, hierarchy text, rng bookkeeping.

    The config snapshot stores the model's head widths explicitly (resolved
    from the hierarchy when the config left them empty), so rebuilding the
    model never depends on information outside the checkpoint.
    """
    resolved = replace(
        config,
        model=replace(
            config.model,
            heads=tuple(config.stack_config().num_classes_per_head),
        ),
    )
    meta = {
        "config": format_config(resolved),
        "hierarchy": hierarchy.to_text() if hierarchy is not None else None,
        "rng": {
            "data_seed": config.data.seed,
            "model_seed": config.model.seed,
            "train_seed": config.train.seed,
            "val_seed": config.preprocess.val_seed,
            "hierarchy_seed": config.hierarchy.seed,
        },
    }
    if extra:
        meta.update(extra)
    return meta


def model_from_checkpoint(ckpt: Checkpoint, path="<checkpoint>") -> Model:
    """Rebuild the model a checkpoint describes, bit-exact.

    The architecture comes from the embedded config snapshot; every stored
    parameter, buffer, and mask must match the rebuilt model's shapes
    exactly, and none may be missing or left over.
    """
    if "config" not in ckpt.meta:
        raise CheckpointError(f"{path}: meta lacks the 'config' snapshot")
    cfg = parse_config(ckpt.meta["config"], source=f"{path}:meta.config")
    model = build_model(cfg.stack_config(), seed=cfg.model.seed)
    slots: dict[str, np.ndarray] = {
        name: t.data for name, t in model.named_params().items()
    }
    buffers = model.named_buffers()
    missing = (set(slots) | set(buffers)) - set(ckpt.arrays)
    extra = set(ckpt.arrays) - (set(slots) | set(buffers))
    if missing or extra:
        problems = []
        if missing:
            problems.append(f"missing arrays: {', '.join(sorted(missing)[:5])}")
        if extra:
            problems.append(f"unexpected arrays: {', '.join(sorted(extra)[:5])}")
        raise CheckpointError(f"{path}: {'; '.join(problems)}")
    for name, arr in ckpt.arrays.items():
        dest = slots.get(name)
        if dest is None:
            dest = buffers[name]
        if dest.shape != arr.shape:
            raise CheckpointError(
                f"{path}: array {name!r} has shape {arr.shape}, model expects {dest.shape}"
            )
        dest[...] = arr
    known_masks = {name: conv for name, conv, _bn in model.prunable_convs()}
    for name, mask in ckpt.masks.items():
        conv = known_masks.get(name)
        if conv is None:
            raise CheckpointError(f"{path}: mask for unknown convolution {name!r}")
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (conv.weight.data.shape[0],):
            raise CheckpointError(
                f"{path}: mask {name!r} has shape {mask.shape}, convolution has "
                f"{conv.weight.data.shape[0]} filters"
            )
        model.masks[name] = mask
    model.enforce_masks()
    model.is_trained = bool(ckpt.meta.get("is_trained", False))
    return model
