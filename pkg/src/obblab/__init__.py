"""Oriented-bounding-box label assignment, sampling geometry, and detection
loss numerics, with a deterministic experiment CLI."""

from .geometry import (
    ConvexQuad,
    DegenerateQuadError,
    OrientedBox,
    aspect_ratio,
    center_distance,
    mc_iou_oracle,
    normalize_angle,
    normalize_obb,
    obb_to_polygon,
    polygon_intersection_area,
    quad_to_obb,
    rotated_iou,
)
from .assignment import (
    AnchorGrid,
    AssignmentResult,
    GroundTruth,
    MasConfig,
    angle_weight,
    assign_atss,
    assign_maxiou,
    assign_mas,
    generate_anchors,
    iou_statistics,
    mas_threshold,
    select_candidates,
    shape_weight,
)
from .sampling import (
    DcnOffsetField,
    FeatureGrid,
    OffsetPair,
    SamplingPattern,
    bilinear_sample,
    dcn_offset_field,
    deformable_sample,
    initial_sampling_positions,
    refine_positions,
    sampling_pattern,
    shrink_obb,
)
from .losses import (
    BetaState,
    BoxDelta,
    LossBreakdown,
    LossTargets,
    MultiTaskLossConfig,
    SmoothL1Config,
    box_deltas,
    build_loss_targets,
    decode_box_deltas,
    focal_loss,
    focal_loss_grad,
    multi_task_loss,
    scale_similarity,
    smooth_l1,
    smooth_l1_grad,
    update_beta,
)
from .scenes import (
    AnnotationRecord,
    DotaParseError,
    Scene,
    SceneGenerationError,
    SceneSpec,
    dota_category_table,
    generate_scene,
    parse_dota_file,
    parse_dota_line,
    parse_dota_lines,
    records_to_gts,
    save_scene,
    scene_to_dota_lines,
)

__version__ = "0.1.0"
