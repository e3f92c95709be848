"""Dataset-to-training glue: cropping, resizing, and bundle assembly.

A raw dataset (rendered frames plus per-frame 2-d skeletons) becomes a
``DataBundle`` in two steps: every clip is optionally cropped to its
skeleton bounding box (10% margin) and resized to a square working size,
then the validation subset is carved out of the test split.
"""

from __future__ import annotations

import numpy as np

from .dataset import ClipSet, DataBundle
from .errors import DataError
from .preprocess import CropRect, crop_rect, crop_resize
from .training import split_validation


def prepare_clip(
    frames: np.ndarray,
    skeleton2d: np.ndarray | None,
    crop: bool,
    out_size: int,
    margin: float = 0.10,
) -> np.ndarray:
    """One [T,H,W] clip -> cropped/resized float clip scaled to [0,1]."""
    f = np.asarray(frames)
    if f.ndim != 3:
        raise DataError(f"expected [T,H,W] frames, got shape {f.shape}")
    t, h, w = f.shape
    if crop:
        if skeleton2d is None:
            raise DataError("cropping requested but the clip has no skeleton")
        rect = crop_rect(skeleton2d, w, h, margin=margin)
    else:
        rect = CropRect.full_frame(w, h)
    out = crop_resize(f.astype(np.float64)[:, None], rect, out_size, out_size)
    return out[:, 0] / 255.0


def preprocess_dataset(
    dataset, crop: bool = True, out_size: int = 40, margin: float = 0.10
) -> dict:
    """Split-name -> ClipSet of prepared clips, preserving dataset order."""
    by_split: dict[str, list] = {}
    for clip in dataset.clips:
        sk = getattr(clip, "skeleton2d", None)
        arr = prepare_clip(clip.frames, sk, crop, out_size, margin)
        by_split.setdefault(clip.split, []).append((clip.clip_id, clip.label, arr))
    out = {}
    for split, rows in by_split.items():
        out[split] = ClipSet(
            clips=[r[2] for r in rows],
            labels=np.array([r[1] for r in rows], dtype=np.int64),
            ids=[r[0] for r in rows],
        )
    return out


def make_bundle(
    dataset,
    crop: bool = True,
    out_size: int = 40,
    margin: float = 0.10,
    val_fraction: float = 0.10,
    val_seed: int = 0,
) -> DataBundle:
    """Prepare all clips and carve the validation subset from the test split."""
    sets = preprocess_dataset(dataset, crop=crop, out_size=out_size, margin=margin)
    if "train" not in sets or "test" not in sets:
        missing = {"train", "test"} - set(sets)
        raise DataError(f"dataset lacks required splits: {sorted(missing)}")
    val, test = split_validation(sets["test"], val_fraction, val_seed)
    return DataBundle(train=sets["train"], val=val, test=test)
