"""Synthetic action clips with planted class structure.

Classes are built from coarse motion families times a fine speed band:
family 0 sways laterally, family 1 bounces vertically, family 2 orbits on a
circle, and family 3 keeps the body still while one joint waves.  Every
family splits into equally many speed classes whose frequency bands nearly
touch at the boundary, so classes inside a family are genuinely confusable
while families stay visually distinct — a hierarchy derived from a
confusion matrix should rediscover the families.

Each clip renders a small multi-joint subject as Gaussian blobs at an
off-center position over optional static clutter.  The emitted 2-d joint
positions are the exact rendering coordinates, and the 3-d skeleton is
their inverse projection at a per-clip constant depth, so projecting the
3-d joints with the dataset's own projection parameters reproduces the 2-d
pixels.  All randomness comes from per-clip streams of the dataset seed,
making generation byte-identical for equal specs and safe to parallelize
per clip.  Class semantics are mirror-invariant, so horizontal flip
augmentation never changes a label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .preprocess import ProjectionParams, invert_projection

_FAMILY_NAMES = ("sway", "bounce", "orbit", "wave")


@dataclass
class SyntheticSpec:
    """Generator knobs; classes = families x speed bands, balanced."""

    n_classes: int = 8
    n_families: int = 4
    clips_per_class: int = 40
    frame_h: int = 96
    frame_w: int = 128
    clip_len: int = 32
    n_joints: int = 5
    clutter: float = 0.5
    offset_range: float = 0.25
    test_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_families < 1 or self.n_classes < 1:
            raise ConfigError("need at least one class and one family")
        if self.n_classes % self.n_families != 0:
            raise ConfigError(
                f"unbalanced superfamilies: {self.n_classes} classes do not "
                f"split evenly into {self.n_families} families"
            )
        if self.n_families > len(_FAMILY_NAMES):
            raise ConfigError(
                f"at most {len(_FAMILY_NAMES)} motion families are defined, "
                f"got {self.n_families}"
            )
        if self.clips_per_class < 2:
            raise ConfigError("need at least two clips per class")
        if self.frame_h < 32 or self.frame_w < 32:
            raise ConfigError("frames must be at least 32x32")
        if self.clip_len < 2:
            raise ConfigError("clips need at least two frames")
        if self.n_joints < 2:
            raise ConfigError("need at least two joints")
        if not 0.0 <= self.clutter <= 1.0:
            raise ConfigError(f"clutter level must lie in [0,1], got {self.clutter}")
        if not 0.0 <= self.offset_range <= 0.45:
            raise ConfigError(
                f"offset range must lie in [0, 0.45], got {self.offset_range}"
            )
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(
                f"test fraction must lie in (0,1), got {self.test_fraction}"
            )


@dataclass
class SyntheticClip:
    clip_id: str
    label: int
    split: str
    frames: np.ndarray      # [T,H,W] uint8
    skeleton2d: np.ndarray  # [T,J,2] float pixels (x, y)
    skeleton3d: np.ndarray  # [T,J,3] float camera coordinates
    depth: float


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    params: ProjectionParams
    clips: list
    family_of_class: np.ndarray

    def split(self, name: str) -> list:
        return [c for c in self.clips if c.split == name]


def _speed_band(speed: int) -> tuple[float, float]:
    # Adjacent bands sit 0.25 cycles/clip apart (at least a 19% frequency
    # ratio at the boundary), so the oscillation rate is recoverable from a
    # handful of sampled frames yet close enough that residual mistakes land
    # on the neighbouring speed class, while the size and swing jitter below
    # keeps shortcuts through raw per-frame displacement unreliable.
    lo = 0.9 + 0.65 * speed
    return lo, lo + 0.4


def _template(n_joints: int, scale: float) -> np.ndarray:
    """Joint offsets: joint 0 at the body center, the rest on a ring."""
    offs = np.zeros((n_joints, 2))
    for j in range(1, n_joints):
        a = 2.0 * math.pi * (j - 1) / (n_joints - 1)
        offs[j] = (0.8 * scale * math.cos(a), 0.8 * scale * math.sin(a))
    return offs


def _add_blob(frame: np.ndarray, cx: float, cy: float, sigma: float, amp: float):
    h, w = frame.shape
    r = int(math.ceil(3.0 * sigma))
    x0, x1 = max(0, int(math.floor(cx)) - r), min(w, int(math.floor(cx)) + r + 1)
    y0, y1 = max(0, int(math.floor(cy)) - r), min(h, int(math.floor(cy)) + r + 1)
    if x0 >= x1 or y0 >= y1:
        return
    gx = np.exp(-((np.arange(x0, x1) - cx) ** 2) / (2.0 * sigma * sigma))
    gy = np.exp(-((np.arange(y0, y1) - cy) ** 2) / (2.0 * sigma * sigma))
    frame[y0:y1, x0:x1] += amp * np.outer(gy, gx)


def _render_clip(spec: SyntheticSpec, joints: np.ndarray, scale: float, rng):
    t_len, n_joints = joints.shape[:2]
    h, w = spec.frame_h, spec.frame_w
    frames = np.zeros((t_len, h, w))

    n_blobs = int(round(spec.clutter * 8.0))
    blobs = [
        (
            rng.uniform(0.0, w),
            rng.uniform(0.0, h),
            rng.uniform(2.0, 6.0),
            rng.uniform(0.15, 0.45),
        )
        for _ in range(n_blobs)
    ]
    amp = 0.85 + rng.uniform(0.0, 0.1)
    noise_sd = 0.01 + 0.02 * spec.clutter
    noise = rng.normal(0.0, noise_sd, size=frames.shape)

    sig_torso = max(1.5, 0.28 * scale)
    sig_joint = max(1.2, 0.20 * scale)
    for t in range(t_len):
        f = frames[t]
        for bx, by, bs, ba in blobs:  # clutter is static across the clip
            _add_blob(f, bx, by, bs, ba)
        _add_blob(f, joints[t, 0, 0], joints[t, 0, 1], sig_torso, amp)
        for j in range(1, n_joints):
            _add_blob(f, joints[t, j, 0], joints[t, j, 1], sig_joint, amp)
    frames = np.clip(frames + noise, 0.0, 1.0)
    return (np.round(frames * 255.0)).astype(np.uint8)


def _clip_joints(spec: SyntheticSpec, family: int, speed: int, rng):
    """Absolute pixel positions [T,J,2] for one clip of the given class."""
    h, w = spec.frame_h, spec.frame_w
    s_min = 0.12 * min(h, w)
    scale = s_min * rng.uniform(1.0, 1.3)

    lo, hi = _speed_band(speed)
    freq = rng.uniform(lo, hi)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    direction = 1.0 if rng.random() < 0.5 else -1.0
    # Size and swing jitter stay well below the speed bands' frequency ratio,
    # so per-frame displacement alone cannot separate the bands: the classes
    # differ by oscillation rate, not by how far the subject moves.
    amp = 0.5 * scale * rng.uniform(0.95, 1.1)

    # Keep the whole subject (ring + widest motion + blob tails) inside the
    # frame; the waving joint's 2.2x swing is the widest path any joint takes.
    margin = 0.8 * scale + 2.2 * amp + 3.0 * max(1.5, 0.28 * scale) + 1.0
    cx = w / 2.0 + rng.uniform(-1.0, 1.0) * spec.offset_range * w
    cy = h / 2.0 + rng.uniform(-1.0, 1.0) * spec.offset_range * h
    cx = float(np.clip(cx, margin, w - margin))
    cy = float(np.clip(cy, margin, h - margin))

    t_len = spec.clip_len
    angle = 2.0 * math.pi * (freq * np.arange(t_len) / t_len) + phase
    zeros = np.zeros(t_len)
    if family == 0:  # lateral sway
        path = np.stack([amp * np.sin(angle) * direction, zeros], axis=1)
    elif family == 1:  # vertical bounce
        path = np.stack([zeros, amp * np.sin(angle)], axis=1)
    elif family == 2:  # circular orbit
        path = np.stack(
            [amp * np.cos(angle) * direction, amp * np.sin(angle)], axis=1
        )
    else:  # single-joint wave, body still
        path = np.zeros((t_len, 2))

    joints = _template(spec.n_joints, scale)[None] + path[:, None, :]
    joints += np.array([cx, cy])
    if family == 3:
        # The waving joint swings wider than whole-body paths do: it is the
        # only moving pixel mass in this family, so its oscillation must
        # stay readable after cropping and downsampling.
        joints[:, 1, 1] += 2.2 * amp * np.sin(angle)
    return joints, scale


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Render every clip of the spec; see the module docstring for the design."""
    spec.validate()
    params = ProjectionParams(
        c_x=558.1 * spec.frame_w / 640.0,
        c_y=579.5 * spec.frame_h / 480.0,
        b_x=spec.frame_w / 2.0,
        b_y=spec.frame_h / 2.0,
    )
    per_family = spec.n_classes // spec.n_families
    n_train = int(round((1.0 - spec.test_fraction) * spec.clips_per_class))
    clips = []
    for cls in range(spec.n_classes):
        family, speed = divmod(cls, per_family)
        for i in range(spec.clips_per_class):
            rng = np.random.default_rng((spec.seed, cls, i))
            joints, scale = _clip_joints(spec, family, speed, rng)
            frames = _render_clip(spec, joints, scale, rng)
            depth = float(rng.uniform(2.0, 4.0))
            skeleton3d = invert_projection(joints, depth, params)
            clips.append(
                SyntheticClip(
                    clip_id=f"c{cls:02d}_{i:03d}",
                    label=cls,
                    split="train" if i < n_train else "test",
                    frames=frames,
                    skeleton2d=joints,
                    skeleton3d=skeleton3d,
                    depth=depth,
                )
            )
    family_of_class = np.arange(spec.n_classes) // per_family
    return SyntheticDataset(
        spec=spec, params=params, clips=clips, family_of_class=family_of_class
    )
