"""Skeleton-guided input preparation.

A pinhole model maps camera-space joints (x right, y down, z forward) to
pixels:

    p_x = c_x * S_x / S_z + b_x
    p_y = c_y * S_y / S_z + b_y

With the biases pinned to the frame center, each focal coefficient has a
closed-form least-squares estimate from joint/pixel pairs.  The 2-d joints
of a clip define one crop rectangle per clip: the tight bounding box over
all joints of all frames, enlarged by a margin fraction of the box size on
every side, clamped to the frame, and rounded outward to integer pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CropError, ProjectionError, UsageError


@dataclass
class ProjectionParams:
    """Pinhole coefficients; defaults are the fitted values for 640x480."""

    c_x: float = 558.1
    c_y: float = 579.5
    b_x: float = 320.0
    b_y: float = 240.0


def project(skeleton3d: np.ndarray, params: ProjectionParams) -> np.ndarray:
    """Project [T,J,3] camera-space joints to [T,J,2] pixel coordinates."""
    s = np.asarray(skeleton3d, dtype=np.float64)
    if s.ndim != 3 or s.shape[2] != 3:
        raise UsageError(f"project expects [T,J,3] joints, got shape {s.shape}")
    z = s[:, :, 2]
    bad = z <= 0.0
    if bad.any():
        f, j = np.argwhere(bad)[0]
        raise ProjectionError(
            f"non-positive depth {z[f, j]:g} at frame {f}, joint {j}: projection undefined"
        )
    px = params.c_x * s[:, :, 0] / z + params.b_x
    py = params.c_y * s[:, :, 1] / z + params.b_y
    return np.stack([px, py], axis=2)


def invert_projection(
    skeleton2d: np.ndarray, depth, params: ProjectionParams
) -> np.ndarray:
    """Reconstruct [T,J,3] joints from pixels and known positive depths."""
    p = np.asarray(skeleton2d, dtype=np.float64)
    if p.ndim != 3 or p.shape[2] != 2:
        raise UsageError(f"invert_projection expects [T,J,2] pixels, got shape {p.shape}")
    z = np.broadcast_to(np.asarray(depth, dtype=np.float64), p.shape[:2])
    if (z <= 0.0).any():
        raise ProjectionError("depths must be positive to invert the projection")
    x = (p[:, :, 0] - params.b_x) * z / params.c_x
    y = (p[:, :, 1] - params.b_y) * z / params.c_y
    return np.stack([x, y, z], axis=2)


def fit_projection(
    points3d: np.ndarray,
    pixels2d: np.ndarray,
    b_x: float = 320.0,
    b_y: float = 240.0,
) -> ProjectionParams:
    """Least-squares focal coefficients with biases fixed (frame center).

    Each residual is linear in the unknown: p_x - b_x = c_x * (S_x / S_z),
    so c_x = sum(u*v) / sum(u*u) with u = S_x/S_z and v = p_x - b_x.
    """
    pts = np.asarray(points3d, dtype=np.float64)
    pix = np.asarray(pixels2d, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise UsageError(f"points3d must be [M,3], got {pts.shape}")
    if pix.shape != (pts.shape[0], 2):
        raise UsageError(f"pixels2d must be [{pts.shape[0]},2], got {pix.shape}")
    if pts.shape[0] < 1:
        raise ProjectionError("fit_projection needs at least one sample")
    z = pts[:, 2]
    if (z <= 0.0).any():
        raise ProjectionError("fit_projection samples must all have positive depth")

    coeffs = []
    for axis, bias in ((0, b_x), (1, b_y)):
        u = pts[:, axis] / z
        denom = float(u @ u)
        if denom == 0.0:
            name = "S_x" if axis == 0 else "S_y"
            raise ProjectionError(
                f"degenerate fit: every sample has {name} = 0, coefficient unidentifiable"
            )
        coeffs.append(float(u @ (pix[:, axis] - bias)) / denom)
    return ProjectionParams(c_x=coeffs[0], c_y=coeffs[1], b_x=float(b_x), b_y=float(b_y))


# ---------------------------------------------------------------------------
# Cropping
# ---------------------------------------------------------------------------


@dataclass
class CropRect:
    """Integer pixel rectangle, inclusive-exclusive: [x0,x1) x [y0,y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @classmethod
    def full_frame(cls, frame_w: int, frame_h: int) -> "CropRect":
        return cls(0, 0, int(frame_w), int(frame_h))


def _expand_axis(lo: float, hi: float, margin: float, limit: int) -> tuple[int, int]:
    d = margin * (hi - lo)
    if hi + d < 0.0 or lo - d > limit:
        raise CropError(f"skeleton box [{lo:g},{hi:g}] lies entirely outside [0,{limit}]")
    a = max(0, int(np.floor(lo - d)))
    b = min(limit, int(np.ceil(hi + d)))
    if b <= a:  # degenerate (point skeleton or border contact): keep one pixel
        if a < limit:
            b = a + 1
        else:
            a = b - 1
    return a, b


def crop_rect(
    skeleton2d: np.ndarray, frame_w: int, frame_h: int, margin: float = 0.10
) -> CropRect:
    """Clip-level crop box: joint bounding box + margin, clamped and rounded.

    The margin is a fraction of the box size added on each side.  Multiple
    people should be merged into one [T,J,2] array beforehand; the rectangle
    covers the union of all joints in all frames.
    """
    s = np.asarray(skeleton2d, dtype=np.float64)
    if s.ndim != 3 or s.shape[2] != 2 or s.shape[0] == 0 or s.shape[1] == 0:
        raise CropError(f"need a non-empty [T,J,2] skeleton, got shape {s.shape}")
    if margin < 0.0:
        raise UsageError(f"margin must be nonnegative, got {margin}")
    if frame_w < 1 or frame_h < 1:
        raise UsageError(f"bad frame size {frame_w}x{frame_h}")
    x0, x1 = _expand_axis(float(s[:, :, 0].min()), float(s[:, :, 0].max()), margin, frame_w)
    y0, y1 = _expand_axis(float(s[:, :, 1].min()), float(s[:, :, 1].max()), margin, frame_h)
    return CropRect(x0, y0, x1, y1)


def crop_resize(
    frames: np.ndarray, rect: CropRect, out_h: int = 256, out_w: int = 256
) -> np.ndarray:
    """Bilinearly resample the rectangle of [T,C,H,W] frames to out_h x out_w.

    Half-pixel sample mapping (src = (dst+0.5)*scale-0.5) with edge clamping
    at the rectangle borders, so a full-frame rectangle at unchanged size is
    the identity.
    """
    f = np.asarray(frames, dtype=np.float64)
    if f.ndim != 4:
        raise UsageError(f"frames must be [T,C,H,W], got shape {f.shape}")
    t, c, h, w = f.shape
    if not (0 <= rect.x0 < rect.x1 <= w and 0 <= rect.y0 < rect.y1 <= h):
        raise CropError(f"rect {rect} invalid for {w}x{h} frames")
    if out_h < 1 or out_w < 1:
        raise UsageError(f"bad output size {out_h}x{out_w}")

    def axis_samples(lo, hi, out_n):
        scale = (hi - lo) / out_n
        src = lo + (np.arange(out_n) + 0.5) * scale - 0.5
        base = np.floor(src)
        frac = src - base
        i0 = np.clip(base.astype(np.int64), lo, hi - 1)
        i1 = np.clip(base.astype(np.int64) + 1, lo, hi - 1)
        return i0, i1, frac

    y0, y1, ty = axis_samples(rect.y0, rect.y1, out_h)
    x0, x1, tx = axis_samples(rect.x0, rect.x1, out_w)
    ty = ty[:, None]
    tx = tx[None, :]
    top = f[:, :, y0][:, :, :, x0] * (1 - tx) + f[:, :, y0][:, :, :, x1] * tx
    bot = f[:, :, y1][:, :, :, x0] * (1 - tx) + f[:, :, y1][:, :, :, x1] * tx
    return top * (1 - ty) + bot * ty


# ---------------------------------------------------------------------------
# Frame sampling and augmentation
# ---------------------------------------------------------------------------


def _frame_indices(t_clip: int, n: int, offset: float) -> np.ndarray:
    s = t_clip / n
    idx = np.floor(offset + s * np.arange(n)).astype(np.int64)
    return np.clip(idx, 0, t_clip - 1)


def sample_frames(t_clip: int, n: int = 8, mode: str = "train", rng=None) -> np.ndarray:
    """Indices of n frames from n equal segments of a t_clip-frame clip.

    Train mode draws one uniform offset inside the first segment (shifting
    all segments together); test mode uses the deterministic segment
    midpoint.  Clips shorter than n frames yield repeated indices.
    """
    if t_clip < 1 or n < 1:
        raise UsageError(f"need t_clip >= 1 and n >= 1, got {t_clip}, {n}")
    s = t_clip / n
    if mode == "train":
        if rng is None:
            raise UsageError("train-mode sampling needs an rng")
        offset = float(rng.uniform(0.0, s))
    elif mode == "test":
        offset = s / 2.0
    else:
        raise UsageError(f"mode must be 'train' or 'test', got {mode!r}")
    return _frame_indices(t_clip, n, offset)


def augment(frames: np.ndarray, mode: str, crop_size: int, rng=None) -> np.ndarray:
    """Clip-level augmentation to a square crop.

    Train mode draws one Bernoulli(0.5) horizontal flip and one square crop
    origin, both shared by every frame of the clip (draw order: flip, then
    row, then column).  Test mode is a pure deterministic center crop.
    """
    f = np.asarray(frames, dtype=np.float64)
    if f.ndim != 4:
        raise UsageError(f"frames must be [T,C,H,W], got shape {f.shape}")
    h, w = f.shape[2], f.shape[3]
    if crop_size < 1 or crop_size > h or crop_size > w:
        raise UsageError(f"crop size {crop_size} not in [1, min({h},{w})]")
    if mode == "train":
        if rng is None:
            raise UsageError("train-mode augmentation needs an rng")
        if rng.random() < 0.5:
            f = f[:, :, :, ::-1]
        y0 = int(rng.integers(0, h - crop_size + 1))
        x0 = int(rng.integers(0, w - crop_size + 1))
    elif mode == "test":
        y0 = (h - crop_size) // 2
        x0 = (w - crop_size) // 2
    else:
        raise UsageError(f"mode must be 'train' or 'test', got {mode!r}")
    return np.ascontiguousarray(f[:, :, y0 : y0 + crop_size, x0 : x0 + crop_size])
