"""Detection, forecasting, and planning metrics plus ablation reporting.

Detection quality is center-distance mAP in the nuScenes style: greedy
score-descending matching per distance threshold, all-point interpolated AP,
averaged over thresholds.  Forecasting uses single-mode average displacement
error, planning the endpoint L2 at the 3 s horizon and an oriented-rectangle
collision rate against ground-truth agent rollouts.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .geometry import rect_corners, rects_intersect
from .synthworld import EGO_SIZE, Scene, agent_trajectory

MAP_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class EvalResult:
    map: float
    min_ade: float
    l2_at_3s: float
    collision_rate: float
    n_scenes: int

    def __post_init__(self):
        if not (0.0 <= self.map <= 1.0):
            raise ValueError(f"map must be in [0, 1], got {self.map}")
        if self.min_ade < 0 or self.l2_at_3s < 0:
            raise ValueError("displacement errors must be nonnegative")
        if not (0.0 <= self.collision_rate <= 1.0):
            raise ValueError(f"collision rate must be in [0, 1], got {self.collision_rate}")


def _ap_from_matches(tp: np.ndarray, total_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve."""
    if total_gt == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / total_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # Envelope: precision at recall r is the max precision at any recall >= r.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def map_score(pred_boxes_per_scene, gt_boxes_per_scene, thresholds=MAP_THRESHOLDS) -> float:
    """Center-distance mAP over scenes for the single synthetic class.

    Boxes need attributes ``x`` and ``y``; predictions also need ``score``.
    Predictions are pooled across scenes and matched greedily in descending
    score order to the nearest unmatched ground-truth box of their own scene.
    Scenes with neither ground truth nor predictions are skipped; with no
    ground truth anywhere the score is 0.
    """
    if len(pred_boxes_per_scene) != len(gt_boxes_per_scene):
        raise ValueError("prediction and ground-truth scene lists differ in length")
    ranked = sorted(
        (
            (-float(box.score), si, pi, float(box.x), float(box.y))
            for si, preds in enumerate(pred_boxes_per_scene)
            for pi, box in enumerate(preds)
        ),
    )
    total_gt = sum(len(gts) for gts in gt_boxes_per_scene)
    if total_gt == 0:
        return 0.0
    gt_xy = [np.array([(float(b.x), float(b.y)) for b in gts]).reshape(-1, 2) for gts in gt_boxes_per_scene]

    aps = []
    for threshold in thresholds:
        matched = [np.zeros(len(gts), dtype=bool) for gts in gt_boxes_per_scene]
        tp = np.zeros(len(ranked), dtype=bool)
        for k, (_, si, _, x, y) in enumerate(ranked):
            if gt_xy[si].shape[0] == 0:
                continue
            d = np.hypot(gt_xy[si][:, 0] - x, gt_xy[si][:, 1] - y)
            d = np.where(matched[si], np.inf, d)
            best = int(np.argmin(d))
            if d[best] <= threshold:
                matched[si][best] = True
                tp[k] = True
        aps.append(_ap_from_matches(tp, total_gt))
    return float(np.mean(aps))


def min_ade(predicted, gt_future) -> float:
    """Minimum-over-modes average displacement error; single mode degenerates
    to the plain ADE.  ``predicted`` is (T, 2) or (K, T, 2); gt is (T, 2)."""
    pred = np.asarray(predicted, dtype=np.float64)
    gt = np.asarray(gt_future, dtype=np.float64)
    if pred.ndim == 2:
        pred = pred[None]
    if pred.shape[1:] != gt.shape:
        raise ValueError(f"horizon mismatch: predicted {pred.shape[1:]} vs gt {gt.shape}")
    ades = np.mean(np.linalg.norm(pred - gt[None], axis=-1), axis=-1)
    return float(ades.min())


def l2_at_horizon(plan, gt_plan, horizon_step: int = 6) -> float:
    """Euclidean error between the two step-``horizon_step`` waypoints."""
    p = np.asarray(plan, dtype=np.float64)
    g = np.asarray(gt_plan, dtype=np.float64)
    if p.shape[0] < horizon_step or g.shape[0] < horizon_step:
        raise ValueError(
            f"trajectories must reach step {horizon_step}, got lengths {p.shape[0]} and {g.shape[0]}"
        )
    return float(np.linalg.norm(p[horizon_step - 1] - g[horizon_step - 1]))


def plan_collides(plan: np.ndarray, scene: Scene, ego_size=EGO_SIZE) -> bool:
    """True when the planned ego footprint hits any agent's rollout footprint.

    Ego yaw at step t comes from the segment (waypoint t-1, waypoint t) with
    waypoint 0 at the origin; degenerate segments keep the previous yaw.
    """
    plan = np.asarray(plan, dtype=np.float64)
    steps = plan.shape[0]
    rollouts = [agent_trajectory(a, steps=steps) for a in scene.agents]
    prev = np.zeros(2)
    prev_yaw = 0.0
    for t in range(1, steps + 1):
        wp = plan[t - 1]
        seg = wp - prev
        yaw = math.atan2(seg[1], seg[0]) if float(seg @ seg) > 1e-18 else prev_yaw
        ego_rect = rect_corners(wp[0], wp[1], ego_size[0], ego_size[1], yaw)
        for agent, (positions, yaws) in zip(scene.agents, rollouts):
            agent_rect = rect_corners(
                positions[t, 0], positions[t, 1], agent.width, agent.length, yaws[t]
            )
            if rects_intersect(ego_rect, agent_rect):
                return True
        prev, prev_yaw = wp, yaw
    return False


def collision_rate(plans, scenes, ego_size=EGO_SIZE) -> float:
    """Fraction of scenes whose plan hits any agent at any step."""
    if len(scenes) == 0:
        raise ValueError("collision rate is undefined over zero scenes")
    if len(plans) != len(scenes):
        raise ValueError("need one plan per scene")
    hits = sum(plan_collides(plan, scene, ego_size) for plan, scene in zip(plans, scenes))
    return hits / len(scenes)


def relative_change(value: float, s0_value: float, direction: str) -> float:
    """Percent improvement of a variant over the no-distillation baseline."""
    if direction not in ("higher_better", "lower_better"):
        raise ValueError(f"direction must be higher_better or lower_better, got {direction!r}")
    if s0_value == 0:
        raise ValueError("baseline value must be nonzero")
    if direction == "higher_better":
        return (value - s0_value) / s0_value * 100.0
    return (s0_value - value) / s0_value * 100.0


@dataclass(frozen=True)
class AblationRow:
    variant: str
    result: EvalResult
    rel_map: float
    rel_min_ade: float
    rel_l2: float
    rel_collision: float


@dataclass(frozen=True)
class AblationReport:
    rows: tuple[AblationRow, ...]


def build_report(results) -> AblationReport:
    """Relative-change report from (variant, EvalResult) pairs; the row whose
    variant is s0 (case-insensitive) is the baseline."""
    pairs = list(results.items()) if isinstance(results, dict) else list(results)
    baseline = next((res for name, res in pairs if name.lower() == "s0"), None)
    if baseline is None:
        raise ValueError("report needs an s0 baseline row")
    rows = []
    for name, res in pairs:
        rows.append(
            AblationRow(
                variant=name,
                result=res,
                rel_map=relative_change(res.map, baseline.map, "higher_better"),
                rel_min_ade=relative_change(res.min_ade, baseline.min_ade, "lower_better"),
                rel_l2=relative_change(res.l2_at_3s, baseline.l2_at_3s, "lower_better"),
                rel_collision=relative_change(res.collision_rate, baseline.collision_rate, "lower_better"),
            )
        )
    return AblationReport(rows=tuple(rows))


REPORT_HEADER = "variant,map,min_ade,l2_at_3s,collision_rate,rel_map,rel_min_ade,rel_l2,rel_collision"


def report_to_csv(report: AblationReport) -> str:
    lines = [REPORT_HEADER]
    for row in report.rows:
        r = row.result
        lines.append(
            ",".join(
                [row.variant]
                + [repr(v) for v in (r.map, r.min_ade, r.l2_at_3s, r.collision_rate)]
                + [repr(v) for v in (row.rel_map, row.rel_min_ade, row.rel_l2, row.rel_collision)]
            )
        )
    return "\n".join(lines) + "\n"


def results_from_csv(text: str) -> list[tuple[str, EvalResult]]:
    """Parse raw metric rows (variant,map,min_ade,l2_at_3s,collision_rate,...)."""
    reader = csv.DictReader(io.StringIO(text))
    required = {"variant", "map", "min_ade", "l2_at_3s", "collision_rate"}
    if reader.fieldnames is None or not required.issubset(reader.fieldnames):
        raise ValueError(f"results CSV must carry columns {sorted(required)}, got {reader.fieldnames}")
    out = []
    for row in reader:
        out.append(
            (
                row["variant"].strip(),
                EvalResult(
                    map=float(row["map"]),
                    min_ade=float(row["min_ade"]),
                    l2_at_3s=float(row["l2_at_3s"]),
                    collision_rate=float(row["collision_rate"]),
                    n_scenes=int(row.get("n_scenes", 0) or 0),
                ),
            )
        )
    return out


def results_to_csv(results) -> str:
    """Raw metric rows for (variant, EvalResult) pairs."""
    pairs = list(results.items()) if isinstance(results, dict) else list(results)
    lines = ["variant,map,min_ade,l2_at_3s,collision_rate,n_scenes"]
    for name, r in pairs:
        lines.append(
            ",".join(
                [name]
                + [repr(v) for v in (r.map, r.min_ade, r.l2_at_3s, r.collision_rate)]
                + [str(r.n_scenes)]
            )
        )
    return "\n".join(lines) + "\n"
