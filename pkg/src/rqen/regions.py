"""Fixed upper/middle/lower height division fitted from body landmarks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

N_LANDMARKS = 14
REGION_NAMES = ("u", "m", "l")

# 1-based landmark indices of the three groups
DEFAULT_GROUPING: tuple[tuple[int, ...], ...] = (
    tuple(range(1, 11)),
    (9, 10, 11, 12),
    (11, 12, 13, 14),
)


@dataclass(frozen=True)
class LandmarkSet:
    frame_id: str
    points: np.ndarray  # (14, 2) of (x, y) fractions
    valid: np.ndarray  # (14,) bool

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if pts.shape != (N_LANDMARKS, 2) or valid.shape != (N_LANDMARKS,):
            raise ValueError(f"expected {N_LANDMARKS} landmarks, got points {pts.shape}")
        if np.any((pts[valid] < 0) | (pts[valid] > 1)):
            raise ValueError(f"{self.frame_id}: valid landmark coordinates must lie in [0, 1]")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "valid", valid)


@dataclass(frozen=True)
class RegionLayout:
    b1: float = 3 / 7
    b2: float = 5 / 7

    def __post_init__(self):
        if not 0.0 < self.b1 < self.b2 < 1.0:
            raise ValueError(f"region boundaries must satisfy 0 < b1 < b2 < 1, got ({self.b1}, {self.b2})")

    @classmethod
    def from_ratio(cls, upper: float, middle: float, lower: float) -> "RegionLayout":
        if min(upper, middle, lower) <= 0:
            raise ValueError("ratio components must be positive")
        total = upper + middle + lower
        return cls(upper / total, (upper + middle) / total)

    @property
    def ratio(self) -> tuple[float, float, float]:
        return (self.b1, self.b2 - self.b1, 1.0 - self.b2)

    def rows(self, height: int) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
        """Row ranges of the three regions for a map with ``height`` rows."""
        if height < 3:
            raise ValueError(f"need at least 3 rows to split into regions, got {height}")
        r1 = math.floor(self.b1 * height)
        r2 = math.floor(self.b2 * height)
        # guarantee non-empty regions for thin maps
        r1 = min(max(r1, 1), height - 2)
        r2 = min(max(r2, r1 + 1), height - 1)
        return (0, r1), (r1, r2), (r2, height)


DEFAULT_LAYOUT = RegionLayout()


def split_regions(arr: np.ndarray, layout: RegionLayout = DEFAULT_LAYOUT, axis: int = 0) -> tuple[np.ndarray, ...]:
    """Split an array along its height axis into (upper, middle, lower) views."""
    arr = np.asarray(arr)
    ranges = layout.rows(arr.shape[axis])
    return tuple(np.take(arr, range(a, b), axis=axis) for a, b in ranges)


def _centroid_heights(landmarks: Sequence[LandmarkSet], grouping) -> list[float] | None:
    centers = []
    for group in grouping:
        idx = np.asarray(group) - 1
        ys = [lm.points[idx, 1][lm.valid[idx]] for lm in landmarks]
        ys = np.concatenate(ys) if ys else np.empty(0)
        if ys.size == 0:
            return None
        # one cluster per predefined group: the k-means center is the mean;
        # sort first so the result does not depend on collection order
        centers.append(math.fsum(np.sort(ys)) / ys.size)
    return centers


def layout_from_centers(c1: float, c2: float, c3: float) -> RegionLayout:
    """Boundaries whose bands have midpoints closest (least squares) to the centers."""
    b1 = (4 * c1 + 2 * c2 - 2 * c3 + 1) / 3
    b2 = (2 * c2 + 4 * c3 - 2 * c1 - 2) / 3
    return RegionLayout(b1, b2)


def fit_region_layout(landmarks: Iterable[LandmarkSet], grouping=DEFAULT_GROUPING) -> RegionLayout:
    landmarks = list(landmarks)
    if not landmarks:
        log.warning("no landmarks given; using default 3:2:2 layout")
        return DEFAULT_LAYOUT
    centers = _centroid_heights(landmarks, grouping)
    if centers is None:
        log.warning("a landmark group has no valid points; using default 3:2:2 layout")
        return DEFAULT_LAYOUT
    c1, c2, c3 = centers
    if not c1 < c2 < c3:
        log.warning("group centers %s are not ordered top to bottom; using default layout", centers)
        return DEFAULT_LAYOUT
    try:
        return layout_from_centers(c1, c2, c3)
    except ValueError:
        log.warning("group centers %s give a degenerate layout; using default", centers)
        return DEFAULT_LAYOUT


def read_landmarks(path: str | Path) -> list[LandmarkSet]:
    """Parse a landmark TSV: frame path followed by 28 reals, -1 -1 marking a missing point."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 1 + 2 * N_LANDMARKS:
                raise ValueError(f"{path}:{lineno}: expected {1 + 2 * N_LANDMARKS} fields, got {len(fields)}")
            try:
                coords = np.array([float(v) for v in fields[1:]]).reshape(N_LANDMARKS, 2)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            valid = ~np.all(coords == -1.0, axis=1)
            coords[~valid] = 0.0
            out.append(LandmarkSet(fields[0], coords, valid))
    return out


def write_landmarks(path: str | Path, landmarks: Iterable[LandmarkSet]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for lm in landmarks:
            vals = []
            for (x, y), ok in zip(lm.points, lm.valid):
                vals += [repr(float(x)), repr(float(y))] if ok else ["-1", "-1"]
            fh.write("\t".join([lm.frame_id, *vals]) + "\n")
