"""Anchor generation and positive/negative label assignment for oriented
boxes.

Three strategies share one substrate:

* ``assign_maxiou``  -- fixed thresholds with a best-anchor fallback per
  ground truth.
* ``assign_atss``    -- per-gt adaptive threshold mean + std of candidate
  IoUs, candidates being the k nearest anchors per pyramid level.
* ``assign_mas``     -- the adaptive threshold modulated by a shape weight
  that lowers the bar for elongated and strongly rotated objects.

One square anchor is placed per feature-grid location. Assignment over
independent scenes is embarrassingly parallel; all functions are pure and
the anchor grid is immutable, so it can be shared across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    HALF_PI,
    QUARTER_PI,
    OrientedBox,
    _box_corners,
    _intersection_area,
    contains_points,
)

NEGATIVE = -1
IGNORE = -2

ANGLE_DEPENDENT = "angle-dependent"
CONSTANT_ONE = "constant-one"

# Aspect ratio at which the shape weight compensates to exactly 1 (the most
# common object shape; keeps those objects at the unmodulated threshold).
_REFERENCE_ASPECT = 1.5


@dataclass(frozen=True)
class GroundTruth:
    """An annotated object: its box plus a category id."""

    box: OrientedBox
    class_id: int = 0

    @property
    def aspect(self) -> float:
        return self.box.w / self.box.h

    @property
    def angle(self) -> float:
        return self.box.theta


@dataclass(frozen=True)
class MasConfig:
    """Knobs of the shape-aware adaptive assignment.

    ``lambda_mode`` selects the angle term: ``"angle-dependent"`` (default)
    or ``"constant-one"`` (ablation: |lambda| pinned to 1). ``raw_lambda``
    keeps the signed angle weight in the exponent instead of its magnitude;
    it exists to demonstrate why the magnitude is required and breaks the
    documented threshold monotonicity. ``unit_weight`` bypasses the shape
    weight entirely (f = 1), reducing the strategy to the plain adaptive
    baseline; used by self-checks.
    """

    gamma: float = 5.0
    lambda_mode: str = ANGLE_DEPENDENT
    candidate_k: int = 9
    threshold_clamp: tuple[float, float] = (0.05, 0.95)
    use_center_prior: bool = True
    raw_lambda: bool = False
    unit_weight: bool = False

    def __post_init__(self) -> None:
        if not self.gamma > 0.0:
            raise ValueError("gamma must be positive")
        if self.lambda_mode not in (ANGLE_DEPENDENT, CONSTANT_ONE):
            raise ValueError(f"unknown lambda_mode {self.lambda_mode!r}")
        if self.candidate_k < 1:
            raise ValueError("candidate_k must be >= 1")
        lo, hi = self.threshold_clamp
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError("threshold_clamp must satisfy 0 <= min < max <= 1")


@dataclass(frozen=True, eq=False)
class AnchorLevel:
    stride: float
    width: int
    height: int
    anchor_size: float


@dataclass(frozen=True, eq=False)
class AnchorGrid:
    """Square anchors (theta = 0), one per cell, center (cell + 0.5)*stride.

    Anchors are indexed level-major, then row-major within a level.
    """

    levels: tuple[AnchorLevel, ...]
    centers: np.ndarray = field(repr=False)
    sizes: np.ndarray = field(repr=False)
    level_slices: tuple[slice, ...] = field(repr=False)

    @property
    def num_anchors(self) -> int:
        return self.centers.shape[0]

    def box(self, index: int) -> OrientedBox:
        cx, cy = self.centers[index]
        size = float(self.sizes[index])
        return OrientedBox(float(cx), float(cy), size, size, 0.0)


def generate_anchors(
    image_size: int | tuple[int, int],
    strides: list[float] | tuple[float, ...],
    scale_multiplier: float = 4.0,
) -> AnchorGrid:
    """Lay one square anchor of side stride * scale_multiplier per cell.

    Cell counts are ceil(extent / stride), so partially covered border cells
    still receive an anchor.
    """
    if isinstance(image_size, (int, float)):
        image_size = (image_size, image_size)
    width_px, height_px = image_size
    if width_px <= 0 or height_px <= 0:
        raise ValueError("image_size must be positive")
    strides = tuple(float(s) for s in strides)
    if not strides:
        raise ValueError("at least one stride is required")
    if any(s <= 0 for s in strides) or list(strides) != sorted(strides):
        raise ValueError("strides must be positive and ascending")
    if scale_multiplier <= 0:
        raise ValueError("scale_multiplier must be positive")

    levels = []
    centers = []
    sizes = []
    slices = []
    start = 0
    for stride in strides:
        w_cells = math.ceil(width_px / stride)
        h_cells = math.ceil(height_px / stride)
        levels.append(AnchorLevel(stride, w_cells, h_cells, stride * scale_multiplier))
        ix, iy = np.meshgrid(np.arange(w_cells), np.arange(h_cells))
        cx = (ix.ravel() + 0.5) * stride
        cy = (iy.ravel() + 0.5) * stride
        centers.append(np.stack([cx, cy], axis=1))
        sizes.append(np.full(w_cells * h_cells, stride * scale_multiplier))
        slices.append(slice(start, start + w_cells * h_cells))
        start += w_cells * h_cells
    return AnchorGrid(
        levels=tuple(levels),
        centers=np.concatenate(centers, axis=0),
        sizes=np.concatenate(sizes),
        level_slices=tuple(slices),
    )


def angle_weight(theta: float) -> float:
    """Signed angle weight: -1/2 - sin^2(theta) left of pi/4, +1/2 +
    sin^2(theta - pi/2) at or right of it. Magnitude 0.5 at the equilibrium
    angles {0, pi/2} and 1 at the maximal-mismatch angles {+-pi/4, 3pi/4}."""
    if not -QUARTER_PI <= theta < 3.0 * QUARTER_PI:
        raise ValueError(f"theta={theta} outside [-pi/4, 3pi/4); normalize first")
    if theta < QUARTER_PI:
        return -0.5 - math.sin(-theta) ** 2
    return 0.5 + math.sin(theta - HALF_PI) ** 2


def shape_weight(
    aspect: float,
    theta: float,
    gamma: float,
    lambda_mode: str = ANGLE_DEPENDENT,
    raw_lambda: bool = False,
) -> float:
    """Threshold modulation factor exp((1.5 - aspect * |lambda|) / gamma).

    Algebraically this is the compensated form Co * exp(-(aspect/gamma) *
    |lambda|) with Co = exp(1.5/gamma); the single exponent makes the
    compensation cancel exactly (f == 1.0) at aspect 1.5 with |lambda| = 1.
    Strictly decreasing in aspect, maximal at the equilibrium angles.
    """
    if aspect < 1.0:
        raise ValueError("aspect must be >= 1 (long-edge convention)")
    if gamma <= 0.0:
        raise ValueError("gamma must be positive")
    if lambda_mode == CONSTANT_ONE:
        lam = 1.0
    elif lambda_mode == ANGLE_DEPENDENT:
        lam = angle_weight(theta)
        if not raw_lambda:
            lam = abs(lam)
    else:
        raise ValueError(f"unknown lambda_mode {lambda_mode!r}")
    return math.exp((_REFERENCE_ASPECT - aspect * lam) / gamma)


def select_candidates(grid: AnchorGrid, gt: GroundTruth, k: int) -> np.ndarray:
    """Indices of the k anchors nearest to the gt center, per pyramid level.

    Levels holding fewer than k anchors contribute all of them. Distance ties
    break toward the lower anchor index (stable sort)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    picked = []
    for level_slice in grid.level_slices:
        centers = grid.centers[level_slice]
        d2 = (centers[:, 0] - gt.box.cx) ** 2 + (centers[:, 1] - gt.box.cy) ** 2
        order = np.argsort(d2, kind="stable")[:k]
        picked.append(order + level_slice.start)
    return np.concatenate(picked)


def iou_statistics(candidate_ious) -> tuple[float, float, float]:
    """Mean, population standard deviation, and their sum (the adaptive
    initial threshold) of a candidate IoU list."""
    ious = np.asarray(candidate_ious, dtype=float)
    if ious.size == 0:
        raise ValueError("no candidate IoUs")
    if np.any(ious < 0.0) or np.any(ious > 1.0):
        raise ValueError("IoU values must lie in [0, 1]")
    mean = float(ious.mean())
    std = float(np.sqrt(np.mean((ious - mean) ** 2)))
    return mean, std, mean + std


def mas_threshold(gt: GroundTruth, candidate_ious, cfg: MasConfig) -> float:
    """Shape-modulated adaptive threshold, clamped to cfg.threshold_clamp."""
    _, _, init = iou_statistics(candidate_ious)
    if cfg.unit_weight:
        f = 1.0
    else:
        f = shape_weight(gt.aspect, gt.angle, cfg.gamma, cfg.lambda_mode, cfg.raw_lambda)
    lo, hi = cfg.threshold_clamp
    return min(hi, max(lo, f * init))


@dataclass(frozen=True, eq=False)
class AssignmentResult:
    """Per-anchor label and per-gt bookkeeping.

    ``gt_index[i]`` is the matched gt for positive anchors, ``NEGATIVE`` for
    background, ``IGNORE`` for anchors excluded from the classification loss.
    ``thresholds[g]`` is the IoU threshold that was applied to gt g and
    ``positive_counts[g]`` the number of anchors finally assigned to it.
    """

    gt_index: np.ndarray
    thresholds: np.ndarray
    positive_counts: np.ndarray

    @property
    def num_positives(self) -> int:
        return int(np.count_nonzero(self.gt_index >= 0))

    def positive_mask(self) -> np.ndarray:
        return self.gt_index >= 0

    def negative_mask(self) -> np.ndarray:
        return self.gt_index == NEGATIVE

    def ignore_mask(self) -> np.ndarray:
        return self.gt_index == IGNORE


def _anchor_corner_lists(grid: AnchorGrid, indices: np.ndarray):
    half = grid.sizes[indices] * 0.5
    cx = grid.centers[indices, 0]
    cy = grid.centers[indices, 1]
    x0, x1 = cx - half, cx + half
    y0, y1 = cy - half, cy + half
    return [
        [(x1[i], y1[i]), (x0[i], y1[i]), (x0[i], y0[i]), (x1[i], y0[i])]
        for i in range(len(indices))
    ]


def _ious_against_anchors(grid: AnchorGrid, indices: np.ndarray, gt_box: OrientedBox) -> np.ndarray:
    """Exact IoU between one gt box and the given anchors."""
    gt_poly = _box_corners(gt_box)
    gt_area = gt_box.area
    sizes = grid.sizes[indices]
    areas = sizes * sizes
    out = np.zeros(len(indices))
    for i, anchor_poly in enumerate(_anchor_corner_lists(grid, indices)):
        inter = _intersection_area(gt_poly, anchor_poly)
        if inter > 0.0:
            out[i] = inter / (gt_area + areas[i] - inter)
    return out


def _overlapping_anchor_indices(grid: AnchorGrid, gt_box: OrientedBox) -> np.ndarray:
    """Anchors whose axis-aligned bounds overlap the gt's bounds; every
    anchor with nonzero IoU is included (anchors are axis-aligned)."""
    corners = np.array(_box_corners(gt_box))
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    half = grid.sizes * 0.5
    cx = grid.centers[:, 0]
    cy = grid.centers[:, 1]
    mask = (cx - half < hi[0]) & (cx + half > lo[0]) & (cy - half < hi[1]) & (cy + half > lo[1])
    return np.nonzero(mask)[0]


def _resolve_claims(num_anchors: int, claims: dict[int, list[tuple[float, int]]]) -> np.ndarray:
    """Per-anchor winner-take-all: highest IoU, ties to the lowest gt index."""
    gt_index = np.full(num_anchors, NEGATIVE, dtype=int)
    for anchor, claimants in claims.items():
        best_iou, best_gt = claimants[0]
        for iou, g in claimants[1:]:
            if iou > best_iou or (iou == best_iou and g < best_gt):
                best_iou, best_gt = iou, g
        gt_index[anchor] = best_gt
    return gt_index


def _apply_fallback(
    gt_index: np.ndarray,
    candidates: list[np.ndarray],
    candidate_ious: list[np.ndarray],
) -> None:
    """Give every starved gt its best nonzero-IoU candidate.

    Runs to a fixpoint: forcing may steal the sole positive of another gt,
    which then reclaims its next-best candidate on a later sweep. Anchors
    forced once are not stealable again, which guarantees termination."""
    num_gts = len(candidates)
    forced: set[int] = set()
    changed = True
    while changed:
        changed = False
        for g in range(num_gts):
            if np.any(gt_index == g):
                continue
            ious = candidate_ious[g]
            if ious.size == 0 or ious.max() <= 0.0:
                continue
            order = np.lexsort((candidates[g], -ious))
            for pos in order:
                if ious[pos] <= 0.0:
                    break
                anchor = int(candidates[g][pos])
                if anchor in forced:
                    continue
                gt_index[anchor] = g
                forced.add(anchor)
                changed = True
                break


def _assign_adaptive(grid: AnchorGrid, gts, cfg: MasConfig) -> AssignmentResult:
    num_gts = len(gts)
    thresholds = np.zeros(num_gts)
    candidates: list[np.ndarray] = []
    candidate_ious: list[np.ndarray] = []
    claims: dict[int, list[tuple[float, int]]] = {}

    for g, gt in enumerate(gts):
        cand = select_candidates(grid, gt, cfg.candidate_k)
        ious = _ious_against_anchors(grid, cand, gt.box)
        candidates.append(cand)
        candidate_ious.append(ious)
        thr = mas_threshold(gt, ious, cfg)
        thresholds[g] = thr
        eligible = ious >= thr
        if cfg.use_center_prior:
            eligible &= contains_points(gt.box, grid.centers[cand])
        for anchor, iou in zip(cand[eligible], ious[eligible]):
            claims.setdefault(int(anchor), []).append((float(iou), g))

    gt_index = _resolve_claims(grid.num_anchors, claims)
    _apply_fallback(gt_index, candidates, candidate_ious)
    counts = np.bincount(gt_index[gt_index >= 0], minlength=num_gts) if num_gts else np.zeros(0, dtype=int)
    return AssignmentResult(gt_index=gt_index, thresholds=thresholds, positive_counts=counts)


def assign_mas(grid: AnchorGrid, gts, cfg: MasConfig | None = None) -> AssignmentResult:
    """Shape-aware adaptive assignment.

    Per gt: take the k nearest anchors per level, threshold their IoUs at
    the shape-modulated mean + std, optionally require anchor centers inside
    the gt, resolve multi-gt anchors by IoU, then force a best-IoU fallback
    for gts that would otherwise receive nothing."""
    return _assign_adaptive(grid, gts, cfg or MasConfig())


def assign_atss(
    grid: AnchorGrid,
    gts,
    k: int = 9,
    use_center_prior: bool = True,
    threshold_clamp: tuple[float, float] = (0.05, 0.95),
) -> AssignmentResult:
    """Adaptive-threshold baseline: identical pipeline with the shape weight
    pinned to 1."""
    cfg = MasConfig(
        candidate_k=k,
        use_center_prior=use_center_prior,
        threshold_clamp=threshold_clamp,
        unit_weight=True,
    )
    return _assign_adaptive(grid, gts, cfg)


def assign_maxiou(
    grid: AnchorGrid,
    gts,
    pos_thr: float = 0.5,
    neg_thr: float = 0.4,
) -> AssignmentResult:
    """Fixed-threshold baseline.

    An anchor is positive for its argmax-IoU gt when that IoU >= pos_thr,
    negative below neg_thr, ignored between. Each gt with any nonzero-IoU
    anchor additionally forces its best anchor positive; contested forced
    anchors go to the gt of higher IoU, ties to the lower gt index. Argmax
    ties also break toward the lower gt index, making the labels invariant
    under gt permutation (up to exact-tie degeneracy)."""
    if not 0.0 <= neg_thr <= pos_thr <= 1.0:
        raise ValueError("need 0 <= neg_thr <= pos_thr <= 1")
    num_anchors = grid.num_anchors
    num_gts = len(gts)
    max_iou = np.zeros(num_anchors)
    argmax_gt = np.full(num_anchors, NEGATIVE, dtype=int)
    best_per_gt: list[tuple[float, int]] = []

    for g, gt in enumerate(gts):
        indices = _overlapping_anchor_indices(grid, gt.box)
        ious = _ious_against_anchors(grid, indices, gt.box)
        better = ious > max_iou[indices]
        max_iou[indices[better]] = ious[better]
        argmax_gt[indices[better]] = g
        if ious.size and ious.max() > 0.0:
            pos = int(np.argmax(ious))  # first occurrence: lowest anchor index
            best_per_gt.append((float(ious[pos]), int(indices[pos])))
        else:
            best_per_gt.append((0.0, -1))

    gt_index = np.full(num_anchors, NEGATIVE, dtype=int)
    gt_index[max_iou >= neg_thr] = IGNORE
    positive = max_iou >= pos_thr
    gt_index[positive] = argmax_gt[positive]

    forced_claims: dict[int, list[tuple[float, int]]] = {}
    for g, (iou, anchor) in enumerate(best_per_gt):
        if anchor >= 0:
            forced_claims.setdefault(anchor, []).append((iou, g))
    for anchor, claimants in forced_claims.items():
        best_iou, best_gt = claimants[0]
        for iou, g in claimants[1:]:
            if iou > best_iou or (iou == best_iou and g < best_gt):
                best_iou, best_gt = iou, g
        gt_index[anchor] = best_gt

    counts = np.bincount(gt_index[gt_index >= 0], minlength=num_gts) if num_gts else np.zeros(0, dtype=int)
    thresholds = np.full(num_gts, pos_thr)
    return AssignmentResult(gt_index=gt_index, thresholds=thresholds, positive_counts=counts)
