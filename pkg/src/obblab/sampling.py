"""Shrunk-box sampling geometry and deformable feature sampling.

A box is shrunk about its center, nine sampling points are read off the
shrunk box (center, corners, edge midpoints), normalized offsets nudge the
points, and the refined points are converted into a per-tap offset field
for a 3x3 deformable convolution read via bilinear interpolation.

Offset fields are plain inputs here; no learning happens in this module.
All functions are pure over immutable grids and can run in parallel across
positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import OrientedBox

# Regular 3x3 kernel taps in row-major order: (rx, ry) with ry the row.
REGULAR_TAPS: tuple[tuple[int, int], ...] = (
    (-1, -1), (0, -1), (1, -1),
    (-1, 0), (0, 0), (1, 0),
    (-1, 1), (0, 1), (1, 1),
)

# Pattern index feeding each row-major tap: corners go to corner taps,
# edge midpoints to edge taps, the center to the center tap, so a pattern
# that lands exactly on the regular grid produces an all-zero offset field.
PATTERN_TAP_ORDER: tuple[int, ...] = (3, 8, 4, 7, 0, 5, 2, 6, 1)

NUM_PATTERN_POINTS = 9


@dataclass(frozen=True)
class OffsetPair:
    """Normalized point offset; displaces a point by (w * dx, h * dy)."""

    dx: float
    dy: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.dx) and math.isfinite(self.dy)):
            raise ValueError("offsets must be finite")


@dataclass(frozen=True, eq=False)
class SamplingPattern:
    """The nine initial and offset-refined sampling points of a box."""

    initial_points: np.ndarray
    refined_points: np.ndarray
    source_box: OrientedBox


@dataclass(frozen=True, eq=False)
class DcnOffsetField:
    """Per-tap deformable-convolution offsets in feature-grid cells.

    ``offsets[i]`` belongs to tap ``REGULAR_TAPS[i]``; pattern points are
    routed to taps by ``PATTERN_TAP_ORDER``. ``stride`` records the
    image-to-feature scaling that produced the field.
    """

    offsets: np.ndarray
    p0: tuple[float, float]
    stride: float


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """Dense feature values indexed (x, y, channel); stored row-major as
    (height, width, channels)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3:
            raise ValueError("feature grid must be 2-D or 3-D")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature grid contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def at(self, x: int, y: int, channel: int = 0) -> float:
        return float(self.values[y, x, channel])


def shrink_obb(box: OrientedBox, factor: float) -> OrientedBox:
    """Scale both edge lengths by (1 - factor) about the center; the angle
    is untouched."""
    if not 0.0 <= factor < 1.0:
        raise ValueError("shrink factor must lie in [0, 1)")
    scale = 1.0 - factor
    return OrientedBox(box.cx, box.cy, box.w * scale, box.h * scale, box.theta)


def initial_sampling_positions(box: OrientedBox) -> np.ndarray:
    """Nine pattern points of a box, in image pixels.

    Fixed order: center; the four corners counter-clockwise starting from
    local (+w/2, +h/2); the four edge midpoints counter-clockwise starting
    from the +w/2 edge. All points are rotated by the box angle about the
    center, and all lie inside or on the box.
    """
    hw, hh = 0.5 * box.w, 0.5 * box.h
    local = np.array(
        [
            (0.0, 0.0),
            (hw, hh), (-hw, hh), (-hw, -hh), (hw, -hh),
            (hw, 0.0), (0.0, hh), (-hw, 0.0), (0.0, -hh),
        ]
    )
    c, s = math.cos(box.theta), math.sin(box.theta)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.cx, box.cy])


def _as_offset_array(offsets) -> np.ndarray:
    if isinstance(offsets, np.ndarray):
        arr = offsets.astype(float)
    else:
        arr = np.array(
            [(o.dx, o.dy) if isinstance(o, OffsetPair) else tuple(o) for o in offsets],
            dtype=float,
        )
    if arr.shape != (NUM_PATTERN_POINTS, 2):
        raise ValueError(f"expected {NUM_PATTERN_POINTS} (dx, dy) offsets, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("offsets must be finite")
    return arr


def refine_positions(points: np.ndarray, box: OrientedBox, offsets) -> np.ndarray:
    """Displace each point by (w * dx, h * dy) of the *unshrunk* box, which
    normalizes the offsets across object scales. Affine in the offsets."""
    pts = np.asarray(points, dtype=float)
    if pts.shape != (NUM_PATTERN_POINTS, 2):
        raise ValueError(f"expected {NUM_PATTERN_POINTS} points, got shape {pts.shape}")
    arr = _as_offset_array(offsets)
    return pts + arr * np.array([box.w, box.h])


def sampling_pattern(box: OrientedBox, offsets=None, shrink_factor: float = 0.3) -> SamplingPattern:
    """Shrink, place the nine points, refine with the given offsets (zeros
    when omitted). Offset scaling uses the original box dimensions."""
    initial = initial_sampling_positions(shrink_obb(box, shrink_factor))
    if offsets is None:
        refined = initial.copy()
    else:
        refined = refine_positions(initial, box, offsets)
    return SamplingPattern(initial_points=initial, refined_points=refined, source_box=box)


def dcn_offset_field(refined: np.ndarray, p0: tuple[float, float], stride: float) -> DcnOffsetField:
    """Convert refined image-pixel points (pattern order) into per-tap
    offsets.

    Image coordinates map to the feature grid by uniform 1/stride scaling;
    the tap at grid offset r reads the pattern point playing that
    geometric role (``PATTERN_TAP_ORDER``), with offset point/stride - p0
    - r. A pattern landing exactly on the regular grid around p0 therefore
    yields an all-zero field, reducing deformable to regular sampling.
    """
    pts = np.asarray(refined, dtype=float)
    if pts.shape != (NUM_PATTERN_POINTS, 2):
        raise ValueError(f"expected {NUM_PATTERN_POINTS} refined points, got shape {pts.shape}")
    if stride <= 0:
        raise ValueError("stride must be positive")
    taps = np.array(REGULAR_TAPS, dtype=float)
    offsets = pts[list(PATTERN_TAP_ORDER)] / stride - np.asarray(p0, dtype=float) - taps
    return DcnOffsetField(offsets=offsets, p0=(float(p0[0]), float(p0[1])), stride=float(stride))


def bilinear_sample(grid: FeatureGrid, x: float, y: float, channel: int = 0) -> float:
    """Bilinear interpolation of the four neighbors at fractional cell
    coordinates; positions outside the grid read as zero."""
    x0 = math.floor(x)
    y0 = math.floor(y)
    fx = x - x0
    fy = y - y0
    values = grid.values
    height, width = values.shape[0], values.shape[1]
    acc = 0.0
    for iy, wy in ((y0, 1.0 - fy), (y0 + 1, fy)):
        if wy == 0.0 or not 0 <= iy < height:
            continue
        for ix, wx in ((x0, 1.0 - fx), (x0 + 1, fx)):
            if wx == 0.0 or not 0 <= ix < width:
                continue
            acc += wy * wx * values[iy, ix, channel]
    return float(acc)


def deformable_sample(
    grid: FeatureGrid,
    weights: np.ndarray,
    p0: tuple[float, float],
    field: DcnOffsetField,
) -> float:
    """One deformable 3x3 convolution output at p0.

    Each kernel tap reads the grid at p0 + tap + offset via bilinear
    interpolation; weights of shape (3, 3) apply to every channel, shape
    (3, 3, channels) weights per channel. With an all-zero offset field this
    is a plain 3x3 cross-correlation at p0.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim == 2:
        w = np.repeat(w[:, :, None], grid.channels, axis=2)
    if w.shape != (3, 3, grid.channels):
        raise ValueError(f"kernel shape {w.shape} does not match 3x3x{grid.channels}")
    if field.offsets.shape != (len(REGULAR_TAPS), 2):
        raise ValueError("offset field must carry one offset per kernel tap")
    px, py = float(p0[0]), float(p0[1])
    acc = 0.0
    for i, (rx, ry) in enumerate(REGULAR_TAPS):
        ox, oy = field.offsets[i]
        sx = px + rx + ox
        sy = py + ry + oy
        for c in range(grid.channels):
            wt = w[ry + 1, rx + 1, c]
            if wt != 0.0:
                acc += wt * bilinear_sample(grid, sx, sy, c)
    return acc
