"""Deterministic experiment CLI.

Subcommands: ``stats`` (positive-sample statistics over synthetic scenes),
``thresholds`` (shape-weight / threshold surfaces with built-in monotonicity
checks), ``loss-check`` (gradient self-checks and an adaptive-beta
trajectory), ``iou`` (exact and Monte-Carlo IoU of two boxes),
``assign-file`` (assignment report for an annotation file) and ``cfs-demo``
(sampling-pattern and deformable-sampling dump).

Outputs are CSV for tabular data and JSON for structured reports, both
tagged with a schema version. Every subcommand is byte-deterministic for a
fixed seed. Exit codes: 0 success, 2 usage/config error, 3 data error,
4 self-check failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .assignment import (
    ANGLE_DEPENDENT,
    CONSTANT_ONE,
    AnchorGrid,
    AssignmentResult,
    GroundTruth,
    MasConfig,
    assign_atss,
    assign_maxiou,
    assign_mas,
    generate_anchors,
    iou_statistics,
    shape_weight,
)
from .geometry import QUARTER_PI, HALF_PI, normalize_obb, mc_iou_oracle, rotated_iou
from .losses import (
    BetaState,
    focal_loss,
    focal_loss_grad,
    smooth_l1,
    smooth_l1_grad,
    update_beta,
)
from .sampling import FeatureGrid, dcn_offset_field, deformable_sample, bilinear_sample, sampling_pattern
from .scenes import (
    DotaParseError,
    SceneSpec,
    generate_scene,
    parse_dota_file,
    records_to_gts,
    scene_spec_from_dict,
)

SCHEMA_VERSION = "1"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_SELFCHECK = 4

STRATEGIES = ("maxiou", "atss", "mas")

# Deterministic per-iteration spread emulating a proposal population around
# the scheduled similarity value.
_BATCH_SPREAD = (0.9, 0.95, 1.0, 1.05, 1.1)


class ConfigError(ValueError):
    """Invalid configuration file or flag combination."""


class SelfCheckError(RuntimeError):
    """A built-in verification failed."""


@dataclass(frozen=True)
class RunConfig:
    """Validated settings for one CLI invocation."""

    mas: MasConfig
    maxiou_pos: float
    maxiou_neg: float
    atss_k: int
    scene: SceneSpec
    strides: tuple[float, ...]
    scale_multiplier: float
    stats_scenes: int
    thr_aspect_count: int
    thr_aspect_range: tuple[float, float]
    thr_angle_count: int
    thr_candidate_ious: tuple[float, ...]
    thr_gammas: tuple[float, ...]
    beta_state: BetaState
    loss_iterations: int
    loss_tau: float
    loss_points: int
    loss_beta: float
    focal_alpha: float
    focal_gamma: float


@dataclass(frozen=True, eq=False)
class BinnedStats:
    """Per-bin assignment statistics along one sweep axis."""

    axis: str
    edges: np.ndarray
    gt_count: np.ndarray
    mean_positives: np.ndarray
    zero_positive_gts: np.ndarray
    strategy: str

    def rows(self):
        for i in range(len(self.gt_count)):
            center = 0.5 * (self.edges[i] + self.edges[i + 1])
            mean = self.mean_positives[i]
            yield (
                i,
                float(self.edges[i]),
                float(self.edges[i + 1]),
                float(center),
                int(self.gt_count[i]),
                float(mean) if not math.isnan(mean) else math.nan,
                int(self.zero_positive_gts[i]),
            )


_STATS_HEADER = (
    "bin_index",
    "bin_low",
    "bin_high",
    "bin_center",
    "gt_count",
    "mean_positives",
    "zero_positive_gts",
)


def _strict(section: dict, allowed: set[str], context: str) -> None:
    extra = set(section) - allowed
    if extra:
        raise ConfigError(f"unknown {context} keys: {sorted(extra)}")


def _pair(value, context: str) -> tuple[float, float]:
    pair = tuple(float(v) for v in value)
    if len(pair) != 2:
        raise ConfigError(f"{context} must be a [low, high] pair")
    return pair


def load_run_config(path: str | None) -> RunConfig:
    """Parse the JSON configuration (all sections optional) and reject
    anything it does not understand."""
    data: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    _strict(
        data,
        {"schema_version", "mas", "maxiou", "atss", "scene", "anchors", "stats", "thresholds", "beta", "loss_check"},
        "config",
    )
    try:
        mas_raw = dict(data.get("mas", {}))
        _strict(mas_raw, {"gamma", "lambda_mode", "candidate_k", "threshold_clamp", "use_center_prior", "raw_lambda"}, "mas")
        if "threshold_clamp" in mas_raw:
            mas_raw["threshold_clamp"] = _pair(mas_raw["threshold_clamp"], "mas.threshold_clamp")
        mas = replace(MasConfig(), **mas_raw)

        maxiou = dict(data.get("maxiou", {}))
        _strict(maxiou, {"pos_thr", "neg_thr"}, "maxiou")
        pos_thr = float(maxiou.get("pos_thr", 0.5))
        neg_thr = float(maxiou.get("neg_thr", 0.4))
        if not 0.0 <= neg_thr <= pos_thr <= 1.0:
            raise ConfigError("maxiou thresholds must satisfy 0 <= neg <= pos <= 1")

        atss = dict(data.get("atss", {}))
        _strict(atss, {"k"}, "atss")
        atss_k = int(atss.get("k", 9))

        scene = scene_spec_from_dict(data.get("scene", {}))

        anchors = dict(data.get("anchors", {}))
        _strict(anchors, {"strides", "scale_multiplier"}, "anchors")
        strides = tuple(float(s) for s in anchors.get("strides", (8, 16, 32, 64, 128)))
        multiplier = float(anchors.get("scale_multiplier", 4.0))

        stats = dict(data.get("stats", {}))
        _strict(stats, {"scenes"}, "stats")
        stats_scenes = int(stats.get("scenes", 5))
        if stats_scenes < 1:
            raise ConfigError("stats.scenes must be >= 1")

        thr = dict(data.get("thresholds", {}))
        _strict(thr, {"aspect_count", "aspect_range", "angle_count", "candidate_ious", "gammas"}, "thresholds")
        thr_aspect_count = int(thr.get("aspect_count", 100))
        thr_aspect_range = _pair(thr.get("aspect_range", (1.0, 12.0)), "thresholds.aspect_range")
        thr_angle_count = int(thr.get("angle_count", 64))
        thr_candidate_ious = tuple(float(v) for v in thr.get("candidate_ious", (0.3, 0.5, 0.7)))
        thr_gammas = tuple(float(g) for g in thr.get("gammas", (mas.gamma,)))
        if thr_aspect_count < 2 or thr_angle_count < 2:
            raise ConfigError("threshold grids need at least 2 points per axis")
        if thr_aspect_range[0] < 1.0:
            raise ConfigError("thresholds.aspect_range minimum must be >= 1")

        beta_raw = dict(data.get("beta", {}))
        _strict(beta_raw, {"beta_scale", "momentum", "clamp"}, "beta")
        if "clamp" in beta_raw:
            beta_raw["clamp"] = _pair(beta_raw["clamp"], "beta.clamp")
        beta_state = replace(BetaState(), **beta_raw)

        loss = dict(data.get("loss_check", {}))
        _strict(loss, {"iterations", "tau", "points", "beta", "focal_alpha", "focal_gamma"}, "loss_check")
        loss_iterations = int(loss.get("iterations", 200))
        loss_tau = float(loss.get("tau", 30.0))
        loss_points = int(loss.get("points", 1000))
        loss_beta = float(loss.get("beta", 1.0))
        focal_alpha = float(loss.get("focal_alpha", 0.25))
        focal_gamma = float(loss.get("focal_gamma", 2.0))
        if loss_iterations < 1 or loss_points < 1 or loss_tau <= 0 or loss_beta <= 0:
            raise ConfigError("loss_check values must be positive")
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None

    return RunConfig(
        mas=mas,
        maxiou_pos=pos_thr,
        maxiou_neg=neg_thr,
        atss_k=atss_k,
        scene=scene,
        strides=strides,
        scale_multiplier=multiplier,
        stats_scenes=stats_scenes,
        thr_aspect_count=thr_aspect_count,
        thr_aspect_range=thr_aspect_range,
        thr_angle_count=thr_angle_count,
        thr_candidate_ious=thr_candidate_ious,
        thr_gammas=thr_gammas,
        beta_state=beta_state,
        loss_iterations=loss_iterations,
        loss_tau=loss_tau,
        loss_points=loss_points,
        loss_beta=loss_beta,
        focal_alpha=focal_alpha,
        focal_gamma=focal_gamma,
    )


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    try:
        mas = cfg.mas
        if getattr(args, "gamma", None) is not None:
            mas = replace(mas, gamma=args.gamma)
            cfg = replace(cfg, thr_gammas=(args.gamma,))
        if getattr(args, "raw_lambda", False):
            mas = replace(mas, raw_lambda=True)
        if getattr(args, "lambda_mode", None) is not None:
            mas = replace(mas, lambda_mode=args.lambda_mode)
        cfg = replace(cfg, mas=mas)
        if getattr(args, "scenes", None) is not None:
            if args.scenes < 1:
                raise ConfigError("--scenes must be >= 1")
            cfg = replace(cfg, stats_scenes=args.scenes)
        if getattr(args, "image_size", None) is not None:
            width, height = args.image_size
            scene = replace(cfg.scene, image_size=(int(width), int(height)))
            scene.validate()
            cfg = replace(cfg, scene=scene)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, schema: str, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# schema: {schema}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


def _write_json(path: Path, payload: dict) -> None:
    payload = {"schema_version": SCHEMA_VERSION, **payload}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_csv(path) -> tuple[str, list[str], list[list[str]]]:
    """Read back a CSV written by this tool: (schema line, header, rows)."""
    with open(path, encoding="utf-8") as fh:
        schema_line = fh.readline().strip()
        if not schema_line.startswith("# schema: "):
            raise ValueError(f"{path} is missing its schema line")
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    return schema_line.removeprefix("# schema: "), header, rows


def _assign(strategy: str, grid: AnchorGrid, gts, cfg: RunConfig) -> AssignmentResult:
    if strategy == "maxiou":
        return assign_maxiou(grid, gts, cfg.maxiou_pos, cfg.maxiou_neg)
    if strategy == "atss":
        return assign_atss(
            grid,
            gts,
            k=cfg.atss_k,
            use_center_prior=cfg.mas.use_center_prior,
            threshold_clamp=cfg.mas.threshold_clamp,
        )
    if strategy == "mas":
        return assign_mas(grid, gts, cfg.mas)
    raise ConfigError(f"unknown strategy {strategy!r}")


def _bin_stats(axis, values, positives, lo, hi, bins, strategy) -> BinnedStats:
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, bins - 1)
    gt_count = np.bincount(idx, minlength=bins)
    totals = np.bincount(idx, weights=positives, minlength=bins)
    zeros = np.bincount(idx[np.asarray(positives) == 0], minlength=bins)
    with np.errstate(invalid="ignore"):
        means = np.where(gt_count > 0, totals / np.maximum(gt_count, 1), np.nan)
    return BinnedStats(
        axis=axis,
        edges=edges,
        gt_count=gt_count,
        mean_positives=means,
        zero_positive_gts=zeros,
        strategy=strategy,
    )


def run_assignment_stats(cfg: RunConfig, strategy: str, base_seed: int):
    """Generate scenes, assign, and bin positives by aspect and by angle."""
    grid = generate_anchors(cfg.scene.image_size, cfg.strides, cfg.scale_multiplier)
    aspects: list[float] = []
    angles: list[float] = []
    positives: list[int] = []
    for index in range(cfg.stats_scenes):
        scene = generate_scene(replace(cfg.scene, seed=base_seed + index))
        result = _assign(strategy, grid, scene.gts, cfg)
        for g, gt in enumerate(scene.gts):
            aspects.append(gt.aspect)
            angles.append(gt.angle)
            positives.append(int(result.positive_counts[g]))
    aspect_stats = _bin_stats(
        "aspect", aspects, positives, *cfg.scene.aspect_range, cfg.scene.aspect_bins, strategy
    )
    angle_stats = _bin_stats(
        "angle", angles, positives, *cfg.scene.angle_range, cfg.scene.angle_bins, strategy
    )
    totals = {
        "gt_count": len(positives),
        "positives_total": int(np.sum(positives)),
        "zero_positive_gts": int(np.sum(np.asarray(positives) == 0)),
    }
    return aspect_stats, angle_stats, totals


def _stats_json_block(stats: BinnedStats) -> dict:
    return {
        "edges": [float(e) for e in stats.edges],
        "gt_count": [int(c) for c in stats.gt_count],
        "mean_positives": [None if math.isnan(m) else float(m) for m in stats.mean_positives],
        "zero_positive_gts": [int(z) for z in stats.zero_positive_gts],
    }


def cmd_stats(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    out = _out_dir(args)
    aspect_stats, angle_stats, totals = run_assignment_stats(cfg, args.strategy, args.seed)
    _write_csv(out / "stats_aspect.csv", "obblab.stats.v1", _STATS_HEADER, aspect_stats.rows())
    _write_csv(out / "stats_angle.csv", "obblab.stats.v1", _STATS_HEADER, angle_stats.rows())
    _write_json(
        out / "stats.json",
        {
            "strategy": args.strategy,
            "seed": args.seed,
            "scenes": cfg.stats_scenes,
            "totals": totals,
            "aspect": _stats_json_block(aspect_stats),
            "angle": _stats_json_block(angle_stats),
        },
    )
    print(f"wrote stats for strategy={args.strategy} over {totals['gt_count']} gts to {out}")
    return EXIT_OK


def _equilibrium_distance(angles: np.ndarray) -> np.ndarray:
    return np.minimum(np.abs(angles), np.abs(angles - HALF_PI))


def threshold_surface(cfg: RunConfig, gamma: float):
    """The (aspect, angle) -> (shape weight, threshold) table for one gamma."""
    aspects = np.linspace(*cfg.thr_aspect_range, cfg.thr_aspect_count)
    angles = np.linspace(-QUARTER_PI, 3.0 * QUARTER_PI, cfg.thr_angle_count, endpoint=False)
    _, _, init = iou_statistics(cfg.thr_candidate_ious)
    weights = np.empty((cfg.thr_aspect_count, cfg.thr_angle_count))
    for i, aspect in enumerate(aspects):
        for j, angle in enumerate(angles):
            weights[i, j] = shape_weight(
                float(aspect), float(angle), gamma, cfg.mas.lambda_mode, cfg.mas.raw_lambda
            )
    pre_clamp = weights * init
    lo, hi = cfg.mas.threshold_clamp
    clamped = np.clip(pre_clamp, lo, hi)
    return aspects, angles, weights, pre_clamp, clamped


def verify_threshold_surface(aspects: np.ndarray, angles: np.ndarray, weights: np.ndarray) -> list[str]:
    """The documented monotonicity relationships, checked on the pre-clamp
    surface. Returns a list of violation descriptions."""
    problems = []
    if not np.all(np.diff(weights, axis=0) < 0.0):
        problems.append("shape weight is not strictly decreasing in aspect at fixed angle")
    dist = _equilibrium_distance(angles)
    order = np.argsort(dist, kind="stable")
    reordered = weights[:, order]
    if not np.all(np.diff(reordered, axis=1) <= 1e-12):
        problems.append("shape weight increases with distance from the equilibrium angles")
    nearest = dist <= dist.min() + 1e-12
    row_max = weights.max(axis=1)
    if not np.all(np.isclose(weights[:, nearest].max(axis=1), row_max, rtol=0, atol=1e-15)):
        problems.append("per-aspect maximum is not at the equilibrium-nearest angle")
    return problems


def cmd_thresholds(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    out = _out_dir(args)
    all_problems = {}
    for gamma in cfg.thr_gammas:
        aspects, angles, weights, pre, clamped = threshold_surface(cfg, gamma)
        rows = []
        for i in range(len(aspects)):
            for j in range(len(angles)):
                rows.append(
                    (
                        float(aspects[i]),
                        float(angles[j]),
                        float(weights[i, j]),
                        float(pre[i, j]),
                        float(clamped[i, j]),
                    )
                )
        name = f"thresholds_gamma{gamma:g}.csv"
        _write_csv(
            out / name,
            "obblab.thresholds.v1",
            ("aspect", "angle", "shape_weight", "pre_clamp_threshold", "clamped_threshold"),
            rows,
        )
        problems = verify_threshold_surface(aspects, angles, weights)
        if problems:
            all_problems[f"{gamma:g}"] = problems
    _write_json(
        out / "thresholds.json",
        {
            "gammas": [float(g) for g in cfg.thr_gammas],
            "candidate_ious": list(cfg.thr_candidate_ious),
            "lambda_mode": cfg.mas.lambda_mode,
            "raw_lambda": cfg.mas.raw_lambda,
            "monotonicity_violations": all_problems,
        },
    )
    if all_problems:
        for gamma, problems in all_problems.items():
            for problem in problems:
                print(f"self-check failed (gamma={gamma}): {problem}", file=sys.stderr)
        return EXIT_SELFCHECK
    print(f"wrote {len(cfg.thr_gammas)} threshold surface(s) to {out}")
    return EXIT_OK


def gradient_check(seed: int, points: int, beta: float, focal_alpha: float, focal_gamma: float):
    """Max relative error of the analytic gradients against central
    differences. Points within 1e-4 of the smooth-L1 knee (or within one
    difference step of zero) are skipped."""
    rng = np.random.default_rng(seed)
    step = 1e-6

    xs = []
    while len(xs) < points:
        x = float(rng.uniform(-4.0 * beta, 4.0 * beta))
        if abs(abs(x) - beta) < 1e-4 or abs(x) < step:
            continue
        xs.append(x)
    xs = np.array(xs)
    fd = (smooth_l1(xs + step, beta) - smooth_l1(xs - step, beta)) / (2.0 * step)
    ana = smooth_l1_grad(xs, beta)
    sl1_rel = np.abs(ana - fd) / np.maximum(np.abs(fd), 1e-12)
    sl1_worst = int(np.argmax(sl1_rel))

    ps = rng.uniform(0.001, 0.999, points)
    ts = (np.arange(points) % 2 == 0).astype(int)
    fd = (focal_loss(ps + step, ts, focal_alpha, focal_gamma) - focal_loss(ps - step, ts, focal_alpha, focal_gamma)) / (2.0 * step)
    ana = focal_loss_grad(ps, ts, focal_alpha, focal_gamma)
    focal_rel = np.abs(ana - fd) / np.maximum(np.abs(fd), 1e-12)
    focal_worst = int(np.argmax(focal_rel))

    return {
        "smooth_l1": {
            "max_relative_error": float(sl1_rel.max()),
            "worst_point": float(xs[sl1_worst]),
            "points": points,
        },
        "focal": {
            "max_relative_error": float(focal_rel.max()),
            "worst_point": float(ps[focal_worst]),
            "worst_target": int(ts[focal_worst]),
            "points": points,
        },
    }


def run_beta_trajectory(
    state: BetaState,
    iterations: int,
    tau: float,
    schedule: str = "improving",
    constant_s: float = 1.0,
):
    """Drive the adaptive knee with a synthetic proposal-quality schedule.

    ``improving`` raises the similarity as 1 - 0.5 exp(-t/tau), emulating
    predictions that match ground-truth scale better as training advances
    (an emulation, not a measurement of any trained model). Each iteration
    feeds a deterministic five-value spread around the scheduled similarity.
    """
    rows = []
    for t in range(iterations):
        if schedule == "improving":
            s = 1.0 - 0.5 * math.exp(-t / tau)
        elif schedule == "constant":
            s = constant_s
        else:
            raise ConfigError(f"unknown schedule {schedule!r}")
        batch = [min(1.0, max(1e-9, s * u)) for u in _BATCH_SPREAD]
        state = update_beta(state, batch)
        rows.append((t, s, state.history, state.beta_scale))
    return rows, state


def cmd_loss_check(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    out = _out_dir(args)
    iterations = args.iterations if args.iterations is not None else cfg.loss_iterations
    tau = args.tau if args.tau is not None else cfg.loss_tau

    report = gradient_check(args.seed, cfg.loss_points, cfg.loss_beta, cfg.focal_alpha, cfg.focal_gamma)
    tolerance = 1e-5
    offenders = [
        name
        for name in ("smooth_l1", "focal")
        if report[name]["max_relative_error"] > tolerance
    ]
    rows, _ = run_beta_trajectory(cfg.beta_state, iterations, tau, args.schedule, args.constant_s)
    _write_csv(
        out / "beta_trajectory.csv",
        "obblab.beta.v1",
        ("iteration", "scheduled_similarity", "raw_target", "beta"),
        rows,
    )
    _write_json(
        out / "gradient_check.json",
        {
            "tolerance": tolerance,
            "passed": not offenders,
            "offenders": offenders,
            "schedule": args.schedule,
            "iterations": iterations,
            "tau": tau,
            **report,
        },
    )
    if offenders:
        for name in offenders:
            print(
                f"gradient self-check failed for {name}: "
                f"max relative error {report[name]['max_relative_error']:.3e}",
                file=sys.stderr,
            )
        return EXIT_SELFCHECK
    print(
        "gradient checks passed "
        f"(smooth_l1 {report['smooth_l1']['max_relative_error']:.2e}, "
        f"focal {report['focal']['max_relative_error']:.2e}); "
        f"beta trajectory written to {out}"
    )
    return EXIT_OK


def cmd_iou(args: argparse.Namespace) -> int:
    values = args.box
    box_a = normalize_obb(*values[:5])
    box_b = normalize_obb(*values[5:])
    print(f"{rotated_iou(box_a, box_b):.6f}")
    if args.oracle is not None:
        if args.oracle < 1:
            raise ConfigError("--oracle must be >= 1")
        estimate = mc_iou_oracle(box_a, box_b, args.oracle, args.seed)
        print(f"oracle(n={args.oracle}): {estimate:.6f}")
    return EXIT_OK


def cmd_assign_file(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    out = _out_dir(args)
    parse_result = parse_dota_file(args.annotations)
    if parse_result.errors:
        for error in parse_result.errors:
            print(f"{args.annotations}: {error}", file=sys.stderr)
        return EXIT_DATA
    gts, skipped = records_to_gts(parse_result.records, include_difficult=args.include_difficult)

    grid = generate_anchors(cfg.scene.image_size, cfg.strides, cfg.scale_multiplier)
    comparison = {}
    selected: AssignmentResult | None = None
    for strategy in STRATEGIES:
        result = _assign(strategy, grid, gts, cfg)
        comparison[strategy] = {
            "positives_total": int(result.num_positives),
            "zero_positive_gts": int(np.sum(result.positive_counts == 0)) if gts else 0,
        }
        if strategy == args.strategy:
            selected = result
    per_gt = []
    for g, gt in enumerate(gts):
        per_gt.append(
            {
                "index": g,
                "class_id": int(gt.class_id),
                "aspect": float(gt.aspect),
                "angle": float(gt.angle),
                "threshold": float(selected.thresholds[g]),
                "positives": int(selected.positive_counts[g]),
            }
        )
    _write_json(
        out / "assign_report.json",
        {
            "annotations": str(args.annotations),
            "strategy": args.strategy,
            "gt_count": len(gts),
            "skipped_degenerate": skipped,
            "include_difficult": bool(args.include_difficult),
            "image_size": list(cfg.scene.image_size),
            "per_gt": per_gt,
            "comparison": comparison,
        },
    )
    print(f"assigned {len(gts)} gts with strategy={args.strategy}; report in {out}")
    return EXIT_OK


def load_feature_grid(path) -> FeatureGrid:
    """Read the flat text format: a 'width height channels' header line,
    then height*width*channels whitespace-separated values in row-major
    order (rows outer, channels innermost)."""
    with open(path, encoding="utf-8") as fh:
        tokens: list[str] = []
        dims: tuple[int, int, int] | None = None
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if dims is None:
                parts = line.split()
                if len(parts) != 3:
                    raise ValueError("feature header must be 'width height channels'")
                dims = (int(parts[0]), int(parts[1]), int(parts[2]))
                continue
            tokens.extend(line.split())
    if dims is None:
        raise ValueError("feature file is empty")
    width, height, channels = dims
    values = np.array([float(t) for t in tokens])
    if values.size != width * height * channels:
        raise ValueError(
            f"feature file holds {values.size} values, expected {width * height * channels}"
        )
    return FeatureGrid(values.reshape(height, width, channels))


def _load_offsets(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    arr = np.asarray(data, dtype=float)
    if arr.shape != (9, 2):
        raise ValueError(f"offsets file must hold 9 [dx, dy] pairs, got shape {arr.shape}")
    return arr


def _demo_kernel(kind: str, channels: int, seed: int) -> np.ndarray:
    if kind == "delta":
        kernel = np.zeros((3, 3, channels))
        kernel[1, 1, :] = 1.0
        return kernel
    if kind == "average":
        return np.full((3, 3, channels), 1.0 / 9.0)
    if kind == "random":
        return np.random.default_rng(seed).normal(size=(3, 3, channels))
    raise ConfigError(f"unknown kernel {kind!r}")


def cmd_cfs_demo(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    grid = load_feature_grid(args.features)
    box = normalize_obb(*args.box)
    offsets = _load_offsets(args.offsets) if args.offsets else None
    if not 0.0 <= args.shrink < 1.0:
        raise ConfigError("--shrink must lie in [0, 1)")
    if args.stride <= 0:
        raise ConfigError("--stride must be positive")
    pattern = sampling_pattern(box, offsets, args.shrink)
    p0 = (math.floor(box.cx / args.stride), math.floor(box.cy / args.stride))
    field = dcn_offset_field(pattern.refined_points, p0, args.stride)
    kernel = _demo_kernel(args.kernel, grid.channels, args.seed)
    value = deformable_sample(grid, kernel, p0, field)
    center = pattern.refined_points[0]
    center_samples = [
        bilinear_sample(grid, center[0] / args.stride, center[1] / args.stride, c)
        for c in range(grid.channels)
    ]
    _write_json(
        out / "cfs_demo.json",
        {
            "box": [box.cx, box.cy, box.w, box.h, box.theta],
            "shrink_factor": args.shrink,
            "stride": args.stride,
            "kernel": args.kernel,
            "initial_points": [[float(x), float(y)] for x, y in pattern.initial_points],
            "refined_points": [[float(x), float(y)] for x, y in pattern.refined_points],
            "offset_field": {
                "p0": [float(p0[0]), float(p0[1])],
                "offsets": [[float(x), float(y)] for x, y in field.offsets],
            },
            "deformable_output": float(value),
            "center_point_samples": [float(v) for v in center_samples],
        },
    )
    print(f"sampling dump written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="obblab",
        description="Deterministic oriented-box assignment, sampling, and loss experiments.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON configuration file")
    common.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    common.add_argument("--out", default="obblab-out", help="output directory")

    sub = parser.add_subparsers(dest="command", required=True)

    p_stats = sub.add_parser("stats", parents=[common], help="positive-sample statistics over synthetic scenes")
    p_stats.add_argument("--strategy", choices=STRATEGIES, default="mas")
    p_stats.add_argument("--scenes", type=int, default=None, help="number of scenes (overrides config)")
    p_stats.add_argument("--gamma", type=float, default=None)
    p_stats.add_argument("--raw-lambda", action="store_true", help="debug: keep the signed angle weight")
    p_stats.set_defaults(func=cmd_stats)

    p_thr = sub.add_parser("thresholds", parents=[common], help="shape-weight and threshold surfaces")
    p_thr.add_argument("--gamma", type=float, default=None, help="single gamma (overrides config list)")
    p_thr.add_argument("--lambda-mode", choices=(ANGLE_DEPENDENT, CONSTANT_ONE), default=None)
    p_thr.add_argument("--raw-lambda", action="store_true", help="debug: keep the signed angle weight")
    p_thr.set_defaults(func=cmd_thresholds)

    p_loss = sub.add_parser("loss-check", parents=[common], help="gradient self-checks and beta trajectory")
    p_loss.add_argument("--iterations", type=int, default=None)
    p_loss.add_argument("--tau", type=float, default=None)
    p_loss.add_argument("--schedule", choices=("improving", "constant"), default="improving")
    p_loss.add_argument("--constant-s", type=float, default=1.0, help="similarity for --schedule constant")
    p_loss.set_defaults(func=cmd_loss_check)

    p_iou = sub.add_parser("iou", parents=[common], help="exact IoU of two boxes (cx cy w h theta, twice)")
    p_iou.add_argument("box", type=float, nargs=10, metavar="V")
    p_iou.add_argument("--oracle", type=int, default=None, help="also print a Monte-Carlo estimate with N samples")
    p_iou.set_defaults(func=cmd_iou)

    p_assign = sub.add_parser("assign-file", parents=[common], help="assignment report for an annotation file")
    p_assign.add_argument("annotations", help="annotation text file")
    p_assign.add_argument("--strategy", choices=STRATEGIES, default="mas")
    p_assign.add_argument("--include-difficult", action="store_true")
    p_assign.add_argument("--gamma", type=float, default=None)
    p_assign.add_argument("--raw-lambda", action="store_true")
    p_assign.add_argument("--image-size", type=int, nargs=2, default=None, metavar=("W", "H"))
    p_assign.set_defaults(func=cmd_assign_file)

    p_demo = sub.add_parser("cfs-demo", parents=[common], help="sampling-pattern and deformable-sampling dump")
    p_demo.add_argument("--features", required=True, help="feature grid text file")
    p_demo.add_argument("--box", type=float, nargs=5, required=True, metavar=("CX", "CY", "W", "H", "THETA"))
    p_demo.add_argument("--offsets", default=None, help="JSON file with 9 [dx, dy] pairs")
    p_demo.add_argument("--shrink", type=float, default=0.3)
    p_demo.add_argument("--stride", type=float, default=8.0)
    p_demo.add_argument("--kernel", choices=("delta", "average", "random"), default="delta")
    p_demo.set_defaults(func=cmd_cfs_demo)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SelfCheckError as exc:
        print(f"self-check failure: {exc}", file=sys.stderr)
        return EXIT_SELFCHECK
    except DotaParseError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
