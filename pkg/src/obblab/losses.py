"""Detection loss numerics: box-delta encoding, smooth L1 with analytic
gradient, binary focal loss, the scale-adaptive beta update, and the
weighted multi-task composition over an assignment.

Loss evaluation is pure; the adaptive-beta state is an immutable value that
each update replaces, so distinct training streams stay independent as long
as each keeps its own state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import HALF_PI, OrientedBox, normalize_obb
from .assignment import AnchorGrid, AssignmentResult

logger = logging.getLogger(__name__)

_PROB_EPS = 1e-12


@dataclass(frozen=True)
class BoxDelta:
    """Normalized regression offsets between an anchor and a target box."""

    dx: float
    dy: float
    dw: float
    dh: float
    dtheta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh, self.dtheta])


@dataclass(frozen=True)
class SmoothL1Config:
    """Knee parameter of the smooth L1 loss."""

    beta: float = 1.0

    def __post_init__(self) -> None:
        if not self.beta > 0.0:
            raise ValueError("beta must be positive")


@dataclass(frozen=True)
class BetaState:
    """Running state of the scale-adaptive smooth-L1 knee.

    ``history`` keeps the last raw (pre-clamp, pre-smoothing) target for
    audit; it is None until the first update.
    """

    beta_scale: float = 1.0
    momentum: float = 0.9
    clamp: tuple[float, float] = (0.02, 1.0)
    history: float | None = None

    def __post_init__(self) -> None:
        lo, hi = self.clamp
        if not 0.0 < lo < hi:
            raise ValueError("clamp must satisfy 0 < beta_min < beta_max")
        if not lo <= self.beta_scale <= hi:
            raise ValueError("beta_scale must start inside the clamp range")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass(frozen=True)
class MultiTaskLossConfig:
    """Weights of the two-head detection loss."""

    smooth_l1: SmoothL1Config = SmoothL1Config()
    lambda_reg: float = 1.0
    lambda_cls: float = 1.0
    alpha_init: float = 1.0
    alpha_refined: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass(frozen=True)
class LossBreakdown:
    """Weighted loss terms: ``total == reg_loss + cls_loss``, each term
    already carrying its head weight (alpha) and task weight (lambda) and
    normalized by the positive count (floor 1)."""

    reg_loss: float
    cls_loss: float
    total: float
    lambda_reg: float
    lambda_cls: float
    alpha_init: float
    alpha_refined: float
    num_anchors: int
    num_positives: int


def wrap_angle_delta(delta: float) -> float:
    """Wrap an angle difference into (-pi/2, pi/2] (rectangles repeat every
    pi, so this is the shortest equivalent rotation)."""
    return HALF_PI - (HALF_PI - delta) % math.pi


def box_deltas(anchor: OrientedBox, gt: OrientedBox) -> BoxDelta:
    """Encode gt relative to anchor: center offsets over anchor edges, log
    edge ratios, wrapped angle difference."""
    return BoxDelta(
        dx=(gt.cx - anchor.cx) / anchor.w,
        dy=(gt.cy - anchor.cy) / anchor.h,
        dw=math.log(gt.w / anchor.w),
        dh=math.log(gt.h / anchor.h),
        dtheta=wrap_angle_delta(gt.theta - anchor.theta),
    )


def decode_box_deltas(anchor: OrientedBox, delta: BoxDelta) -> OrientedBox:
    """Inverse of :func:`box_deltas`; the result is normalized, so
    decode(anchor, encode(anchor, gt)) reproduces gt."""
    return normalize_obb(
        anchor.cx + delta.dx * anchor.w,
        anchor.cy + delta.dy * anchor.h,
        anchor.w * math.exp(delta.dw),
        anchor.h * math.exp(delta.dh),
        anchor.theta + delta.dtheta,
    )


def smooth_l1(x, beta: float):
    """Quadratic below the knee, linear above: 0.5 x^2 / beta for |x| < beta
    else |x| - 0.5 beta. Even, convex, continuously differentiable."""
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    ax = np.abs(np.asarray(x, dtype=float))
    out = np.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta)
    return float(out) if out.ndim == 0 else out


def smooth_l1_grad(x, beta: float):
    """Derivative of :func:`smooth_l1`: x / beta inside the knee, sign(x)
    outside (saturated)."""
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    arr = np.asarray(x, dtype=float)
    out = np.where(np.abs(arr) < beta, arr / beta, np.sign(arr))
    return float(out) if out.ndim == 0 else out


def focal_loss(p, t, alpha: float = 0.25, gamma: float = 2.0):
    """Binary focal loss; ``t`` selects the branch per element.

    Positives: -alpha (1-p)^gamma ln p; negatives: -(1-alpha) p^gamma
    ln(1-p). Probabilities are clamped away from {0, 1}. gamma = 0 recovers
    alpha-weighted cross-entropy.
    """
    p = np.clip(np.asarray(p, dtype=float), _PROB_EPS, 1.0 - _PROB_EPS)
    t = np.asarray(t)
    pos = -alpha * (1.0 - p) ** gamma * np.log(p)
    neg = -(1.0 - alpha) * p**gamma * np.log(1.0 - p)
    out = np.where(t == 1, pos, neg)
    return float(out) if out.ndim == 0 else out


def focal_loss_grad(p, t, alpha: float = 0.25, gamma: float = 2.0):
    """Analytic d(focal)/dp, matching :func:`focal_loss` branch for branch."""
    p = np.clip(np.asarray(p, dtype=float), _PROB_EPS, 1.0 - _PROB_EPS)
    t = np.asarray(t)
    if gamma == 0.0:
        pos = -alpha / p
        neg = (1.0 - alpha) / (1.0 - p)
    else:
        pos = alpha * gamma * (1.0 - p) ** (gamma - 1.0) * np.log(p) - alpha * (1.0 - p) ** gamma / p
        neg = (
            -(1.0 - alpha) * gamma * p ** (gamma - 1.0) * np.log(1.0 - p)
            + (1.0 - alpha) * p**gamma / (1.0 - p)
        )
    out = np.where(t == 1, pos, neg)
    return float(out) if out.ndim == 0 else out


def scale_similarity(proposal: OrientedBox, gt: OrientedBox) -> float:
    """Symmetric area-scale agreement in (0, 1]: the smaller ratio of the
    square-rooted areas. Equal areas give exactly 1."""
    a, b = proposal.area, gt.area
    return math.sqrt(min(a, b) / max(a, b))


def update_beta(
    state: BetaState,
    similarities,
    statistic: str = "median",
    k: int | None = None,
) -> BetaState:
    """One adaptive step of the smooth-L1 knee.

    The raw target is the median of (1 - s) over the batch, robust to
    outliers (``statistic="kth-smallest"`` with 1-based ``k`` selects the
    k-th smallest mismatch instead). The new knee is the momentum-smoothed
    target, clamped to the state's range. An empty batch leaves the state
    unchanged and logs a warning.
    """
    sims = np.asarray(list(similarities), dtype=float)
    if sims.size == 0:
        logger.warning("update_beta called with no similarities; state unchanged")
        return state
    mismatch = 1.0 - sims
    if statistic == "median":
        target = float(np.median(mismatch))
    elif statistic == "kth-smallest":
        if k is None or not 1 <= k <= mismatch.size:
            raise ValueError("kth-smallest needs 1 <= k <= batch size")
        target = float(np.sort(mismatch)[k - 1])
    else:
        raise ValueError(f"unknown statistic {statistic!r}")
    lo, hi = state.clamp
    new_beta = state.momentum * state.beta_scale + (1.0 - state.momentum) * target
    return replace(state, beta_scale=min(hi, max(lo, new_beta)), history=target)


@dataclass(frozen=True, eq=False)
class LossTargets:
    """Per-anchor regression targets and class ids; rows are read only where
    the assignment marks the anchor positive."""

    deltas: np.ndarray
    class_ids: np.ndarray


def build_loss_targets(grid: AnchorGrid, gts, assignment: AssignmentResult) -> LossTargets:
    """Encode each positive anchor against its matched gt; other rows stay
    zero."""
    deltas = np.zeros((grid.num_anchors, 5))
    class_ids = np.zeros(grid.num_anchors, dtype=int)
    for anchor in np.nonzero(assignment.gt_index >= 0)[0]:
        gt = gts[assignment.gt_index[anchor]]
        deltas[anchor] = box_deltas(grid.box(int(anchor)), gt.box).as_array()
        class_ids[anchor] = gt.class_id
    return LossTargets(deltas=deltas, class_ids=class_ids)


def _head_terms(
    assignment: AssignmentResult,
    deltas_pred: np.ndarray,
    cls_pred: np.ndarray,
    targets: LossTargets,
    cfg: MultiTaskLossConfig,
) -> tuple[float, float]:
    num_anchors = assignment.gt_index.shape[0]
    deltas_pred = np.asarray(deltas_pred, dtype=float)
    cls_pred = np.asarray(cls_pred, dtype=float)
    if cls_pred.ndim == 1:
        cls_pred = cls_pred[:, None]
    if deltas_pred.shape != (num_anchors, 5):
        raise ValueError(f"deltas_pred shape {deltas_pred.shape} != ({num_anchors}, 5)")
    if cls_pred.shape[0] != num_anchors:
        raise ValueError(f"cls_pred rows {cls_pred.shape[0]} != {num_anchors} anchors")
    if targets.deltas.shape != (num_anchors, 5):
        raise ValueError(f"target deltas shape {targets.deltas.shape} != ({num_anchors}, 5)")

    pos = assignment.positive_mask()
    neg = assignment.negative_mask()
    norm = max(1, int(np.count_nonzero(pos)))

    reg_sum = 0.0
    if np.any(pos):
        errors = deltas_pred[pos] - targets.deltas[pos]
        reg_sum = float(np.sum(smooth_l1(errors, cfg.smooth_l1.beta)))

    num_classes = cls_pred.shape[1]
    scored = pos | neg
    cls_targets = np.zeros((num_anchors, num_classes), dtype=int)
    pos_idx = np.nonzero(pos)[0]
    cls_targets[pos_idx, np.clip(targets.class_ids[pos_idx], 0, num_classes - 1)] = 1
    cls_sum = float(
        np.sum(focal_loss(cls_pred[scored], cls_targets[scored], cfg.focal_alpha, cfg.focal_gamma))
    )
    return cfg.lambda_reg * reg_sum / norm, cfg.lambda_cls * cls_sum / norm


def multi_task_loss(
    assignment: AssignmentResult,
    deltas_pred: np.ndarray,
    cls_pred: np.ndarray,
    targets: LossTargets,
    cfg: MultiTaskLossConfig | None = None,
    refined_deltas: np.ndarray | None = None,
    refined_cls: np.ndarray | None = None,
) -> LossBreakdown:
    """Weighted two-head detection loss over one assignment.

    Regression (smooth L1 over the five delta components) is gated to
    positive anchors; classification (focal) runs over positives and
    negatives, skipping ignored anchors. Each head's terms are normalized by
    the positive count (floor 1). The refined head is optional: when its
    predictions are omitted the total is alpha_init times the initial head's
    loss alone.
    """
    cfg = cfg or MultiTaskLossConfig()
    reg_i, cls_i = _head_terms(assignment, deltas_pred, cls_pred, targets, cfg)
    reg = cfg.alpha_init * reg_i
    cls = cfg.alpha_init * cls_i
    if refined_deltas is not None or refined_cls is not None:
        if refined_deltas is None or refined_cls is None:
            raise ValueError("refined head needs both deltas and class probabilities")
        reg_r, cls_r = _head_terms(assignment, refined_deltas, refined_cls, targets, cfg)
        reg += cfg.alpha_refined * reg_r
        cls += cfg.alpha_refined * cls_r
    return LossBreakdown(
        reg_loss=reg,
        cls_loss=cls,
        total=reg + cls,
        lambda_reg=cfg.lambda_reg,
        lambda_cls=cfg.lambda_cls,
        alpha_init=cfg.alpha_init,
        alpha_refined=cfg.alpha_refined,
        num_anchors=assignment.gt_index.shape[0],
        num_positives=assignment.num_positives,
    )
