"""Rotated-rectangle geometry in the long-edge convention.

An oriented box stores center, long edge ``w``, short edge ``h`` and the
angle of the long edge, restricted to [-pi/4, 3*pi/4). Exact overlap areas
come from Sutherland-Hodgman clipping of convex quads; a seeded Monte-Carlo
estimator is provided as an independent cross-check for tests.

All types are immutable values and all functions are pure, so everything
here is safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

QUARTER_PI = math.pi / 4.0
HALF_PI = math.pi / 2.0

# Vertices closer than this (pixels) are merged after clipping.
_MERGE_EPS = 1e-9


class DegenerateQuadError(ValueError):
    """Raised for quads with (near-)zero area or non-convex vertex sets."""


def normalize_angle(theta: float, period: float = math.pi) -> float:
    """Map an angle into [-pi/4, -pi/4 + period)."""
    return (theta + QUARTER_PI) % period - QUARTER_PI


@dataclass(frozen=True)
class OrientedBox:
    """Rotated rectangle: center (cx, cy), edges w >= h > 0, angle of the
    long edge in [-pi/4, 3*pi/4).

    Square boxes additionally keep theta in [-pi/4, pi/4) so that every
    point set has exactly one representation. Construct via
    :func:`normalize_obb` unless the fields are already canonical.
    """

    cx: float
    cy: float
    w: float
    h: float
    theta: float

    def __post_init__(self) -> None:
        for name in ("cx", "cy", "w", "h", "theta"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite box field {name!r}")
        if not self.w >= self.h > 0.0:
            raise ValueError(f"box requires w >= h > 0, got w={self.w} h={self.h}")
        hi = 3.0 * QUARTER_PI if self.w > self.h else QUARTER_PI
        if not -QUARTER_PI <= self.theta < hi:
            raise ValueError(f"theta={self.theta} outside [-pi/4, {hi})")

    @property
    def area(self) -> float:
        return self.w * self.h


def normalize_obb(cx: float, cy: float, w: float, h: float, theta: float) -> OrientedBox:
    """Canonicalize raw five-parameter values into an :class:`OrientedBox`.

    Swapping the edges when w < h adds pi/2 to the angle; the angle is then
    reduced modulo pi (modulo pi/2 for squares, which are pi/2-symmetric).
    Idempotent and area-preserving.
    """
    cx, cy, w, h, theta = (float(v) for v in (cx, cy, w, h, theta))
    for name, value in (("cx", cx), ("cy", cy), ("w", w), ("h", h), ("theta", theta)):
        if not math.isfinite(value):
            raise ValueError(f"non-finite box field {name!r}")
    if w <= 0.0 or h <= 0.0:
        raise ValueError(f"box edges must be positive, got w={w} h={h}")
    if w < h:
        w, h = h, w
        theta = theta + HALF_PI
    period = HALF_PI if w == h else math.pi
    return OrientedBox(cx, cy, w, h, normalize_angle(theta, period))


@dataclass(frozen=True, eq=False)
class ConvexQuad:
    """Four vertices in counter-clockwise order with positive signed area."""

    vertices: np.ndarray

    @classmethod
    def from_points(cls, points) -> "ConvexQuad":
        """Build a quad from 4 points in any order or winding.

        Clockwise input is reversed; if the given order is not convex the
        points are re-sorted by angle around their centroid (the canonical
        order for points in convex position). Raises
        :class:`DegenerateQuadError` for collinear or non-convex sets.
        """
        pts = np.asarray(points, dtype=float).reshape(4, 2)
        if not np.all(np.isfinite(pts)):
            raise DegenerateQuadError("non-finite vertex")
        ordered = cls._orient(pts)
        if ordered is None:
            center = pts.mean(axis=0)
            angles = np.arctan2(pts[:, 1] - center[1], pts[:, 0] - center[0])
            ordered = cls._orient(pts[np.argsort(angles, kind="stable")])
        if ordered is None:
            raise DegenerateQuadError("vertices are not in convex position")
        ordered = ordered.copy()
        ordered.flags.writeable = False
        return cls(ordered)

    @staticmethod
    def _orient(pts: np.ndarray) -> np.ndarray | None:
        if signed_area(pts) < 0.0:
            pts = pts[::-1]
        nxt = np.roll(pts, -1, axis=0)
        prv = np.roll(pts, 1, axis=0)
        cross = (nxt[:, 0] - pts[:, 0]) * (prv[:, 1] - pts[:, 1]) - (
            nxt[:, 1] - pts[:, 1]
        ) * (prv[:, 0] - pts[:, 0])
        # Strictly convex CCW quads turn left at every vertex.
        if np.all(cross > 0.0):
            return pts
        return None

    @property
    def area(self) -> float:
        return signed_area(self.vertices)


def signed_area(vertices: np.ndarray) -> float:
    """Shoelace signed area; positive for counter-clockwise order."""
    x = vertices[:, 0]
    y = vertices[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def obb_to_polygon(box: OrientedBox) -> ConvexQuad:
    """Corner quad of a box, counter-clockwise from the local (+w/2, +h/2)
    corner."""
    return ConvexQuad.from_points(_box_corners(box))


def _box_corners(box: OrientedBox) -> list[tuple[float, float]]:
    c, s = math.cos(box.theta), math.sin(box.theta)
    hw, hh = 0.5 * box.w, 0.5 * box.h
    corners = []
    for lx, ly in ((hw, hh), (-hw, hh), (-hw, -hh), (hw, -hh)):
        corners.append((box.cx + lx * c - ly * s, box.cy + lx * s + ly * c))
    return corners


def quad_to_obb(quad: ConvexQuad) -> OrientedBox:
    """Minimum-area enclosing rectangle of a convex quad, as a normalized box.

    The optimum is flush with one of the quad's edges, so only the four edge
    directions need to be examined (rotating calipers on a 4-gon).
    """
    pts = quad.vertices
    best = None
    for i in range(4):
        ex = pts[(i + 1) % 4, 0] - pts[i, 0]
        ey = pts[(i + 1) % 4, 1] - pts[i, 1]
        norm = math.hypot(ex, ey)
        if norm < _MERGE_EPS:
            continue
        dx, dy = ex / norm, ey / norm
        u = pts[:, 0] * dx + pts[:, 1] * dy
        v = -pts[:, 0] * dy + pts[:, 1] * dx
        du = float(u.max() - u.min())
        dv = float(v.max() - v.min())
        area = du * dv
        if best is None or area < best[0]:
            cu = 0.5 * float(u.max() + u.min())
            cv = 0.5 * float(v.max() + v.min())
            best = (area, cu * dx - cv * dy, cu * dy + cv * dx, du, dv, math.atan2(dy, dx))
    if best is None or best[0] <= 0.0:
        raise DegenerateQuadError("zero-area quad has no enclosing rectangle")
    _, cx, cy, du, dv, theta = best
    return normalize_obb(cx, cy, du, dv, theta)


def _clip_polygon(subject: list[tuple[float, float]], clip: list[tuple[float, float]]):
    """Sutherland-Hodgman: clip ``subject`` by the convex CCW polygon
    ``clip``. Boundary points count as inside."""
    output = subject
    cx1, cy1 = clip[-1]
    for cx2, cy2 in clip:
        if not output:
            break
        ex, ey = cx2 - cx1, cy2 - cy1
        inputs = output
        output = []
        sx, sy = inputs[-1]
        s_in = ex * (sy - cy1) - ey * (sx - cx1) >= 0.0
        for px, py in inputs:
            p_in = ex * (py - cy1) - ey * (px - cx1) >= 0.0
            if p_in != s_in:
                dx, dy = px - sx, py - sy
                denom = ex * dy - ey * dx
                if denom != 0.0:
                    t = (ex * (cy1 - sy) - ey * (cx1 - sx)) / denom
                    output.append((sx + t * dx, sy + t * dy))
            if p_in:
                output.append((px, py))
            sx, sy, s_in = px, py, p_in
        cx1, cy1 = cx2, cy2
    return output


def _merge_close(points):
    if len(points) < 2:
        return points
    merged = [points[0]]
    for p in points[1:]:
        q = merged[-1]
        if abs(p[0] - q[0]) > _MERGE_EPS or abs(p[1] - q[1]) > _MERGE_EPS:
            merged.append(p)
    while len(merged) > 1 and (
        abs(merged[0][0] - merged[-1][0]) <= _MERGE_EPS
        and abs(merged[0][1] - merged[-1][1]) <= _MERGE_EPS
    ):
        merged.pop()
    return merged


def _vertex_list_area(points) -> float:
    n = len(points)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = points[i]
        x1, y1 = points[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def _intersection_area(subject, clip) -> float:
    clipped = _merge_close(_clip_polygon(subject, clip))
    return max(0.0, _vertex_list_area(clipped))


def polygon_intersection_area(a: ConvexQuad, b: ConvexQuad) -> float:
    """Exact overlap area of two convex quads; zero for degenerate overlap.

    Clipping is exact for convex inputs, so the only rounding comes from the
    edge-intersection arithmetic itself."""
    return _intersection_area([tuple(p) for p in a.vertices], [tuple(p) for p in b.vertices])


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection over union of two oriented boxes, in [0, 1].

    The pair is ordered canonically before clipping so the result is
    bitwise symmetric in its arguments."""
    if (b.cx, b.cy, b.w, b.h, b.theta) < (a.cx, a.cy, a.w, a.h, a.theta):
        a, b = b, a
    inter = _intersection_area(_box_corners(a), _box_corners(b))
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def contains_points(box: OrientedBox, points: np.ndarray, atol: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside (or on) a box; ``atol`` pads the
    half-extents to absorb rotation round-off."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx = pts[:, 0] - box.cx
    dy = pts[:, 1] - box.cy
    local_x = dx * c + dy * s
    local_y = -dx * s + dy * c
    return (np.abs(local_x) <= 0.5 * box.w + atol) & (np.abs(local_y) <= 0.5 * box.h + atol)


def _inside_mask(box: OrientedBox, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx = x - box.cx
    dy = y - box.cy
    lx = dx * c
    lx += dy * s
    np.abs(lx, out=lx)
    mask = lx <= 0.5 * box.w
    dy *= c
    dy -= dx * s
    np.abs(dy, out=dy)
    mask &= dy <= 0.5 * box.h
    return mask


def mc_iou_oracle(a: OrientedBox, b: OrientedBox, samples: int, seed: int) -> float:
    """Monte-Carlo IoU estimate via uniform rejection sampling over the joint
    bounding box of both polygons. Deterministic for a fixed seed; converges
    to :func:`rotated_iou` as ``samples`` grows."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    corners = np.array(_box_corners(a) + _box_corners(b))
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    rng = np.random.default_rng(seed)
    inter_hits = 0
    union_hits = 0
    remaining = samples
    while remaining > 0:
        n = min(remaining, 1_000_000)
        x = rng.uniform(lo[0], hi[0], n)
        y = rng.uniform(lo[1], hi[1], n)
        in_a = _inside_mask(a, x, y)
        in_b = _inside_mask(b, x, y)
        hits_a = int(np.count_nonzero(in_a))
        hits_b = int(np.count_nonzero(in_b))
        in_a &= in_b
        both = int(np.count_nonzero(in_a))
        inter_hits += both
        union_hits += hits_a + hits_b - both
        remaining -= n
    if union_hits == 0:
        return 0.0
    return inter_hits / union_hits


def center_distance(a: OrientedBox, b: OrientedBox) -> float:
    """Euclidean distance between box centers."""
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


def aspect_ratio(box: OrientedBox) -> float:
    """Long edge over short edge; >= 1 by the long-edge invariant."""
    return box.w / box.h
