"""Turn saliency sequences into temporal segments and spatial points.

Frame indices are 0-based and segments are inclusive on both ends. All
functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Segment:
    """Inclusive frame range [start, end] with an optional label id."""

    start: int
    end: int
    label: int | None = None

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise ValueError(f"invalid segment [{self.start}, {self.end}]")

    @property
    def length(self) -> int:
        return self.end - self.start + 1


def map_sums(maps) -> np.ndarray:
    """Per-frame total of each saliency map, the signal temporal grounding uses."""
    return np.array([float(np.asarray(m).sum()) for m in maps], dtype=np.float64)


def temporal_ground(sums: np.ndarray) -> tuple[Segment, bool]:
    """Grow a window around the peak frame until a negative-sum frame stops it.

    The anchor is the earliest argmax; extension in each direction stops at
    the first frame whose sum is strictly negative, so zero-sum frames are
    included. When the anchor itself is negative, the anchor-only segment
    is returned with ``degenerate=True``.
    """
    sums = np.asarray(sums, dtype=np.float64)
    if sums.ndim != 1 or sums.size == 0:
        raise ValueError("need a non-empty 1-d vector of map sums")
    anchor = int(np.argmax(sums))
    if sums[anchor] < 0.0:
        return Segment(anchor, anchor), True
    start = anchor
    while start > 0 and sums[start - 1] >= 0.0:
        start -= 1
    end = anchor
    while end < sums.size - 1 and sums[end + 1] >= 0.0:
        end += 1
    return Segment(start, end), False


def fixed_length_ground(sums: np.ndarray, length: int) -> Segment:
    """Best consecutive window of the given length (ties go to the earliest)."""
    sums = np.asarray(sums, dtype=np.float64)
    if not 1 <= length <= sums.size:
        raise ValueError(f"window length {length} outside 1..{sums.size}")
    windows = np.convolve(sums, np.ones(length), mode="valid")
    start = int(np.argmax(windows))
    return Segment(start, start + length - 1)


def upsample_nearest(m: np.ndarray, frame_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize of a 2-d map to pixel resolution."""
    h, w = m.shape
    H, W = frame_hw
    rows = (np.arange(H) * h) // H
    cols = (np.arange(W) * w) // W
    return m[np.ix_(rows, cols)]


@dataclass(frozen=True)
class SpatialPoint:
    """Argmax pixel of an upsampled map plus the disc used for hit-testing."""

    row: int
    col: int
    radius: float

    def hits(self, bbox: tuple[int, int, int, int]) -> bool:
        """Closed-disc intersection with a pixel box given as (x, y, w, h)."""
        x, y, w, h = bbox
        dx = max(x - self.col, 0, self.col - (x + w - 1))
        dy = max(y - self.row, 0, self.row - (y + h - 1))
        return float(np.hypot(dx, dy)) <= self.radius


def spatial_point(
    maps: np.ndarray,
    t: int,
    frame_hw: tuple[int, int],
    radius: float = 7.5,
) -> SpatialPoint:
    """Locate frame t's maximum at pixel resolution.

    ``maps`` holds one 2-d (or channel-first 3-d, summed here) map per
    frame. Ties resolve to the first pixel in row-major order. The default
    radius corresponds to a 15-pixel diameter probe disc.
    """
    m = np.asarray(maps[t], dtype=np.float64)
    if m.ndim == 3:
        m = m.sum(axis=0)
    up = upsample_nearest(m, frame_hw)
    flat = int(np.argmax(up))
    return SpatialPoint(row=flat // frame_hw[1], col=flat % frame_hw[1], radius=radius)


def temporal_point_game(sums: np.ndarray, gt: Segment) -> bool:
    """Hit iff the peak map sum falls inside the ground-truth segment."""
    peak = int(np.argmax(np.asarray(sums)))
    return gt.start <= peak <= gt.end


def segment_iou(a: Segment, b: Segment) -> float:
    """Intersection over union in whole frames, endpoints inclusive."""
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    union = a.length + b.length - inter
    return inter / union


def localization_accuracy(preds, gts, alpha: float) -> float:
    """Fraction of videos whose single predicted segment reaches IoU >= alpha."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise ValueError("empty evaluation set")
    hits = sum(1 for p, g in zip(preds, gts) if segment_iou(p, g) >= alpha)
    return hits / len(preds)


def pointing_accuracy(hits: int, misses: int) -> float:
    if hits < 0 or misses < 0 or hits + misses == 0:
        raise ValueError("need non-negative counts with at least one trial")
    return hits / (hits + misses)
