"""Tracking boxes to spatio-temporal tubes.

Each skew tracking box is rescaled onto the feature grid, intersected with
every grid cell by Sutherland-Hodgman clipping, and the covered fraction is
thresholded into a per-frame mask.  The ``stride`` frames that collapse onto
one feature time-step are OR-ed together and the surviving cells form the
position set of that (clip, time) slot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, GeometryError, ShapeError

DEFAULT_TAU = 0.5


@dataclass(frozen=True)
class TrackBox:
    frame_index: int
    pts: tuple

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.pts)
        if len(pts) != 4:
            raise GeometryError(f"frame {self.frame_index}: a box needs 4 vertices, got {len(pts)}")
        if not all(math.isfinite(v) for p in pts for v in p):
            raise GeometryError(f"frame {self.frame_index}: non-finite box coordinate")
        if int(self.frame_index) < 0:
            raise GeometryError(f"negative frame index {self.frame_index}")
        object.__setattr__(self, "pts", pts)
        object.__setattr__(self, "frame_index", int(self.frame_index))
        if polygon_area(pts) <= 0.0:
            raise GeometryError(f"frame {self.frame_index}: degenerate (zero-area) box")
        if not _is_convex(pts):
            raise GeometryError(f"frame {self.frame_index}: box is not a simple convex quadrilateral")

    def reflected(self, frame_width: float) -> "TrackBox":
        """Mirror image about the vertical centre line of the frame."""
        return TrackBox(self.frame_index, tuple((frame_width - x, y) for x, y in self.pts))

    def scaled(self, factor: float) -> "TrackBox":
        return TrackBox(self.frame_index, tuple((x * factor, y * factor) for x, y in self.pts))


def _is_convex(pts) -> bool:
    signs = []
    n = len(pts)
    for k in range(n):
        (x0, y0), (x1, y1), (x2, y2) = pts[k], pts[(k + 1) % n], pts[(k + 2) % n]
        cross = (x1 - x0) * (y2 - y1) - (y1 - y0) * (x2 - x1)
        if cross != 0.0:
            signs.append(cross > 0)
    return len(set(signs)) == 1


def polygon_area(poly: Sequence) -> float:
    """Unsigned shoelace area."""
    n = len(poly)
    if n < 3:
        return 0.0
    s = 0.0
    for k in range(n):
        x0, y0 = poly[k]
        x1, y1 = poly[(k + 1) % n]
        s += x0 * y1 - x1 * y0
    return abs(s) / 2.0


def _clip_axis(poly, axis: int, bound: float, keep_greater: bool):
    out = []
    n = len(poly)
    for k in range(n):
        cur = poly[k]
        prev = poly[k - 1]
        cur_in = cur[axis] >= bound if keep_greater else cur[axis] <= bound
        prev_in = prev[axis] >= bound if keep_greater else prev[axis] <= bound
        if cur_in != prev_in:
            t = (bound - prev[axis]) / (cur[axis] - prev[axis])
            other = 1 - axis
            p = [0.0, 0.0]
            p[axis] = bound
            p[other] = prev[other] + t * (cur[other] - prev[other])
            out.append((p[0], p[1]))
        if cur_in:
            out.append(cur)
    return out


def clip_to_rect(poly, xmin: float, ymin: float, xmax: float, ymax: float) -> list:
    """Sutherland-Hodgman clip of a convex polygon against an axis-aligned rectangle."""
    out = list(poly)
    for axis, bound, keep_greater in ((0, xmin, True), (0, xmax, False), (1, ymin, True), (1, ymax, False)):
        if not out:
            break
        out = _clip_axis(out, axis, bound, keep_greater)
    return out


@dataclass(frozen=True)
class GridSpec:
    """How pixel-space frames map onto the (clip, time, row, col) feature grid.

    ``clips`` holds half-open frame ranges ``(start, stop)``; all clips must
    have the same length.  Frames of a clip are grouped ``stride`` at a time
    per feature time-step and a trailing group may hold fewer frames.
    """

    frame_size: tuple  # (width, height) in pixels
    grid: tuple  # (H, W)
    stride: int = 4
    clips: tuple = field(default=None)
    video_length: int = 103

    def __post_init__(self):
        fw, fh = (float(v) for v in self.frame_size)
        h, w = (int(v) for v in self.grid)
        if not (fw > 0 and fh > 0):
            raise ConfigError(f"frame_size must be positive, got {self.frame_size}")
        if h < 1 or w < 1 or int(self.stride) < 1:
            raise ConfigError(f"grid and stride must be >= 1, got grid={self.grid} stride={self.stride}")
        object.__setattr__(self, "frame_size", (fw, fh))
        object.__setattr__(self, "grid", (h, w))
        object.__setattr__(self, "stride", int(self.stride))
        clips = self.clips if self.clips is not None else default_clip_layout(self.video_length)
        clips = tuple((int(a), int(b)) for a, b in clips)
        if not clips:
            raise ConfigError("clip layout is empty")
        lengths = {b - a for a, b in clips}
        if len(lengths) != 1 or min(lengths) < 1:
            raise ConfigError(f"all clips must share one positive length, got {sorted(lengths)}")
        for a, b in clips:
            if a < 0 or b > self.video_length:
                raise ConfigError(f"clip range [{a}, {b}) outside video of {self.video_length} frames")
        object.__setattr__(self, "clips", clips)

    @property
    def clip_length(self) -> int:
        a, b = self.clips[0]
        return b - a

    @property
    def num_clips(self) -> int:
        return len(self.clips)

    @property
    def time_steps(self) -> int:
        return -(-self.clip_length // self.stride)

    @property
    def dims(self) -> tuple:
        return (self.num_clips, self.time_steps, self.grid[0], self.grid[1])

    def frames_for(self, clip: int, t: int) -> range:
        start, stop = self.clips[clip]
        lo = start + t * self.stride
        return range(lo, min(lo + self.stride, stop))

    def to_dict(self) -> dict:
        return {
            "frame_size": list(self.frame_size),
            "grid": list(self.grid),
            "stride": self.stride,
            "clips": [list(c) for c in self.clips],
            "video_length": self.video_length,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            frame_size=tuple(d["frame_size"]),
            grid=tuple(d["grid"]),
            stride=d.get("stride", 4),
            clips=tuple(tuple(c) for c in d["clips"]) if d.get("clips") is not None else None,
            video_length=d.get("video_length", 103),
        )


def default_clip_layout(video_length: int = 103, num_clips: int = 10, clip_length: int = 16) -> tuple:
    """Uniformly strided fixed-length windows; neighbouring windows may overlap."""
    if clip_length > video_length:
        raise ConfigError(f"clip length {clip_length} exceeds video length {video_length}")
    if num_clips == 1:
        return ((0, clip_length),)
    span = video_length - clip_length
    starts = [(2 * c * span + (num_clips - 1)) // (2 * (num_clips - 1)) for c in range(num_clips)]
    return tuple((s, s + clip_length) for s in starts)


def _grid_polygon(box: TrackBox, spec: GridSpec) -> list:
    fw, fh = spec.frame_size
    h, w = spec.grid
    sx, sy = w / fw, h / fh
    poly = [(x * sx, y * sy) for x, y in box.pts]
    return clip_to_rect(poly, 0.0, 0.0, float(w), float(h))


def _cell_coverage(poly, i: int, j: int) -> float:
    return polygon_area(clip_to_rect(poly, float(j), float(i), float(j + 1), float(i + 1)))


def coverage(box: TrackBox, cell: tuple, spec: GridSpec) -> float:
    """Fraction of grid cell ``(i, j)`` covered by ``box``."""
    i, j = cell
    h, w = spec.grid
    if not (0 <= i < h and 0 <= j < w):
        raise ShapeError(f"cell {cell} outside grid {spec.grid}")
    poly = _grid_polygon(box, spec)
    if not poly:
        return 0.0
    return min(1.0, _cell_coverage(poly, i, j))


def coverage_map(box: TrackBox, spec: GridSpec) -> np.ndarray:
    h, w = spec.grid
    out = np.zeros((h, w))
    poly = _grid_polygon(box, spec)
    if len(poly) < 3:
        return out
    xs = [p[0] for p in poly]
    ys = [p[1] for p in poly]
    j0, j1 = max(0, math.floor(min(xs))), min(w, math.ceil(max(xs)))
    i0, i1 = max(0, math.floor(min(ys))), min(h, math.ceil(max(ys)))
    for i in range(i0, i1):
        for j in range(j0, j1):
            out[i, j] = min(1.0, _cell_coverage(poly, i, j))
    return out


def mask_from_box(box: TrackBox, spec: GridSpec, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Cells whose covered fraction reaches ``tau`` (inclusive)."""
    if not (0.0 < tau <= 1.0):
        raise ConfigError(f"tau must lie in (0, 1], got {tau}")
    return coverage_map(box, spec) >= tau


def union_masks(masks: Iterable) -> np.ndarray:
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if not masks:
        raise ConfigError("union_masks needs at least one mask")
    shape = masks[0].shape
    out = masks[0].copy()
    for m in masks[1:]:
        if m.shape != shape:
            raise ShapeError(f"mask shapes differ: {shape} vs {m.shape}")
        out |= m
    return out


class TubeIndex:
    """Selected grid positions for every (clip, time) slot.

    ``flat_index`` lists linear indices into the ``(N, T, H, W)`` grid in
    ascending (n, t, i, j) order; all gather/scatter code relies on it.
    """

    def __init__(self, masks):
        masks = np.asarray(masks, dtype=bool)
        if masks.ndim != 4:
            raise ShapeError(f"tube masks must be (N,T,H,W), got {masks.shape}")
        self.masks = masks.copy()
        self.masks.flags.writeable = False
        self.flat_index = np.flatnonzero(self.masks)
        self.flat_index.flags.writeable = False

    @classmethod
    def full(cls, dims) -> "TubeIndex":
        return cls(np.ones(tuple(dims), dtype=bool))

    @classmethod
    def empty(cls, dims) -> "TubeIndex":
        return cls(np.zeros(tuple(dims), dtype=bool))

    @property
    def dims(self) -> tuple:
        return self.masks.shape

    @property
    def total(self) -> int:
        return int(self.flat_index.size)

    @property
    def occupancy(self) -> float:
        return self.total / self.masks.size

    def positions(self, clip: int, t: int) -> list:
        ii, jj = np.nonzero(self.masks[clip, t])
        return list(zip(ii.tolist(), jj.tolist()))

    def counts(self) -> np.ndarray:
        """|positions| per (clip, time) slot."""
        return self.masks.sum(axis=(2, 3))

    def flipped(self) -> "TubeIndex":
        return TubeIndex(self.masks[..., ::-1])

    def __eq__(self, other):
        return isinstance(other, TubeIndex) and np.array_equal(self.masks, other.masks)

    def __repr__(self):
        return f"TubeIndex(dims={self.dims}, total={self.total})"


def _check_box_order(boxes: Sequence[TrackBox]) -> None:
    for prev, cur in zip(boxes, boxes[1:]):
        if cur.frame_index == prev.frame_index:
            raise DataError(f"duplicate box for frame {cur.frame_index}")
        if cur.frame_index < prev.frame_index:
            raise DataError(f"boxes not sorted: frame {cur.frame_index} follows {prev.frame_index}")


def build_tube(boxes: Sequence[TrackBox], spec: GridSpec, tau: float = DEFAULT_TAU) -> TubeIndex:
    """Rasterize a box track into a tube over ``spec``'s clip/time grid.

    Frames inside the track with no box (tracker dropout) add nothing.  A
    clip layout that reaches past the last tracked frame is a data error.
    """
    boxes = list(boxes)
    _check_box_order(boxes)
    if not boxes:
        raise DataError("empty box track")
    by_frame = {b.frame_index: b for b in boxes}
    last = boxes[-1].frame_index
    if last >= spec.video_length:
        raise DataError(f"box for frame {last} lies beyond video length {spec.video_length}")
    n_clips, n_t, h, w = spec.dims
    needed = max(stop for _, stop in spec.clips) - 1
    if needed > last:
        raise DataError(f"clip layout references frame {needed} but the track ends at frame {last}")

    cache: dict = {}

    def frame_mask(f):
        if f not in cache:
            box = by_frame.get(f)
            cache[f] = np.zeros((h, w), dtype=bool) if box is None else mask_from_box(box, spec, tau)
        return cache[f]

    masks = np.zeros((n_clips, n_t, h, w), dtype=bool)
    for c in range(n_clips):
        for t in range(n_t):
            masks[c, t] = union_masks(frame_mask(f) for f in spec.frames_for(c, t))
    return TubeIndex(masks)


def _rle_row(row) -> list:
    """Run lengths alternating 0-runs and 1-runs, starting with a 0-run."""
    runs = []
    cur, n = False, 0
    for bit in row:
        if bool(bit) == cur:
            n += 1
        else:
            runs.append(n)
            cur, n = bool(bit), 1
    runs.append(n)
    return runs


def _unrle_row(runs, width: int) -> np.ndarray:
    out = np.zeros(width, dtype=bool)
    pos, bit = 0, False
    for r in runs:
        out[pos : pos + r] = bit
        pos += r
        bit = not bit
    if pos != width:
        raise DataError(f"run lengths sum to {pos}, expected row width {width}")
    return out


def dump_tube(tube: TubeIndex) -> dict:
    n_clips, n_t, h, w = tube.dims
    counts = tube.counts()
    return {
        "dims": list(tube.dims),
        "total": tube.total,
        "occupancy": tube.occupancy,
        "counts": counts.tolist(),
        "masks": [[[_rle_row(tube.masks[c, t, i]) for i in range(h)] for t in range(n_t)] for c in range(n_clips)],
    }


def load_tube_dump(d: dict) -> TubeIndex:
    n_clips, n_t, h, w = d["dims"]
    masks = np.zeros((n_clips, n_t, h, w), dtype=bool)
    for c in range(n_clips):
        for t in range(n_t):
            for i in range(h):
                masks[c, t, i] = _unrle_row(d["masks"][c][t][i], w)
    return TubeIndex(masks)
