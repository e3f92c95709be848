"""In-memory clip containers shared by training, evaluation, and data IO."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class ClipSet:
    """A list of preprocessed grayscale clips with one label per clip.

    Each clip is a [T,H,W] float array scaled to [0,1]; clips may differ in
    length but training assumes a common spatial size within a set.
    """

    clips: list
    labels: np.ndarray
    ids: list

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.clips) == len(self.labels) == len(self.ids)):
            raise DataError(
                f"clip/label/id counts disagree: {len(self.clips)}, "
                f"{len(self.labels)}, {len(self.ids)}"
            )
        if len(self.labels) and self.labels.min() < 0:
            raise DataError("labels must be nonnegative")
        for i, c in enumerate(self.clips):
            if np.asarray(c).ndim != 3:
                raise DataError(f"clip {self.ids[i]!r} is not [T,H,W]")

    def __len__(self) -> int:
        return len(self.clips)

    def subset(self, indices) -> "ClipSet":
        idx = [int(i) for i in indices]
        return ClipSet(
            clips=[self.clips[i] for i in idx],
            labels=self.labels[idx],
            ids=[self.ids[i] for i in idx],
        )

    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


@dataclass
class DataBundle:
    """The three clip sets a training run consumes."""

    train: ClipSet
    val: ClipSet
    test: ClipSet
