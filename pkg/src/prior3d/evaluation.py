"""BEV detection metrics over the 50 m range: AP at IoU 0.1 and at 4 m
centroid distance, PR curves, reference-point recall, and a smearing
index along camera rays."""

import csv
import json
import math
from dataclasses import dataclass, asdict, field

import numpy as np

from .detector import decode_detections, frame_from_record
from .geometry import bev_iou, centroid_distance_bev, project_point
from .scene import CLASSES


@dataclass
class EvalConfig:
    iou_threshold: float = 0.1
    centroid_threshold_m: float = 4.0
    max_range_m: float = 50.0
    smearing_score: float = 0.3
    smearing_corridor_m: float = 2.0
    refpoint_radius_m: float = 2.5
    use_nms: bool = False
    nms_iou: float = 0.5

    def __post_init__(self):
        for name in ("iou_threshold", "centroid_threshold_m", "max_range_m"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class PRCurve:
    thresholds: list = field(default_factory=list)
    recalls: list = field(default_factory=list)
    precisions: list = field(default_factory=list)

    def append(self, thr, r, p):
        self.thresholds.append(thr)
        self.recalls.append(r)
        self.precisions.append(p)


@dataclass
class RefPointStats:
    distances: list
    radius: float
    recall: float
    flagged_empty: bool = False


@dataclass
class SmearingStats:
    per_gt_counts: list
    mean: float


def _in_range(cuboid, max_range):
    return math.hypot(cuboid.center[0], cuboid.center[1]) <= max_range


def _pair_measure(det_cuboid, gt_cuboid, matcher):
    if matcher == "iou":
        return bev_iou(det_cuboid, gt_cuboid)
    return centroid_distance_bev(det_cuboid, gt_cuboid)


def _passes(measure, matcher, config):
    if matcher == "iou":
        return measure >= config.iou_threshold
    return measure <= config.centroid_threshold_m


def ap(detections, gts, matcher="iou", config=None):
    """Average precision per class with greedy score-ordered matching.

    `gts` is a list of (frame_id, Cuboid). Detections and ground truth are
    range-filtered first. Detections at equal score enter the PR curve at
    the same threshold; ties are matched lower-centroid-distance first.
    Classes with zero ground truth are omitted from the result.

    Returns {class: {"ap": float, "curve": PRCurve, "n_gt": int}}.
    """
    if matcher not in ("iou", "centroid"):
        raise ValueError(f"unknown matcher {matcher!r}")
    config = config or EvalConfig()
    dets = [d for d in detections if _in_range(d.cuboid, config.max_range_m)]
    gts = [(fid, c) for fid, c in gts if _in_range(c, config.max_range_m)]

    results = {}
    for cls in CLASSES:
        cls_gts = [(fid, c) for fid, c in gts if c.label == cls]
        if not cls_gts:
            continue
        gt_by_frame = {}
        for fid, c in cls_gts:
            gt_by_frame.setdefault(fid, []).append(c)
        cls_dets = [d for d in dets if d.label == cls]

        def tie_distance(d):
            frame_gts = gt_by_frame.get(d.frame_id, [])
            if not frame_gts:
                return math.inf
            return min(centroid_distance_bev(d.cuboid, g) for g in frame_gts)

        cls_dets.sort(key=lambda d: (-d.score, tie_distance(d)))
        matched = {fid: [False] * len(lst) for fid, lst in gt_by_frame.items()}
        n_gt = len(cls_gts)
        curve = PRCurve()
        tp = fp = 0
        i = 0
        while i < len(cls_dets):
            j = i
            while j < len(cls_dets) and cls_dets[j].score == cls_dets[i].score:
                j += 1
            for d in cls_dets[i:j]:
                frame_gts = gt_by_frame.get(d.frame_id, [])
                flags = matched.get(d.frame_id, [])
                best_k = -1
                best_m = None
                for k, g in enumerate(frame_gts):
                    if flags[k]:
                        continue
                    m = _pair_measure(d.cuboid, g, matcher)
                    if not _passes(m, matcher, config):
                        continue
                    better = (best_m is None or (m > best_m if matcher == "iou" else m < best_m))
                    if better:
                        best_m = m
                        best_k = k
                if best_k >= 0:
                    flags[best_k] = True
                    tp += 1
                else:
                    fp += 1
            curve.append(cls_dets[i].score, tp / n_gt, tp / (tp + fp) if tp + fp else 0.0)
            i = j
        ap_value = 0.0
        prev_r = 0.0
        for r, p in zip(curve.recalls, curve.precisions):
            ap_value += (r - prev_r) * p
            prev_r = r
        results[cls] = {"ap": ap_value, "curve": curve, "n_gt": n_gt}
    return results


def refpoint_recall(ref_points_by_frame, gts, radius, max_range=50.0):
    """Nearest-reference-point distance per in-range GT and recall at the
    given radius. Frames with no reference points count distances as inf."""
    distances = []
    flagged = False
    for fid, cub in gts:
        if not _in_range(cub, max_range):
            continue
        pts = ref_points_by_frame.get(fid)
        if pts is None or len(pts) == 0:
            distances.append(math.inf)
            flagged = True
            continue
        d = np.linalg.norm(np.asarray(pts) - cub.center[None, :], axis=1).min()
        distances.append(float(d))
    recall = float(np.mean([d <= radius for d in distances])) if distances else 0.0
    return RefPointStats(distances=distances, radius=radius, recall=recall,
                         flagged_empty=flagged)


def smearing_index(detections, gts, cameras_by_frame, score=0.3, corridor=2.0,
                   max_range=50.0):
    """Mean number of confident predictions strung along the camera-to-GT
    BEV ray, per ground truth."""
    if not 0.0 < score < 1.0:
        raise ValueError("smearing score threshold must lie in (0, 1)")
    if corridor <= 0:
        raise ValueError("corridor width must be positive")
    dets_by_frame = {}
    for d in detections:
        if d.score >= score and _in_range(d.cuboid, max_range):
            dets_by_frame.setdefault(d.frame_id, []).append(d)
    counts = []
    for fid, cub in gts:
        if not _in_range(cub, max_range):
            continue
        cams = cameras_by_frame.get(fid, [])
        best_cam = None
        best_off = None
        for cam in cams:
            u, v, z, valid = project_point(cam, cub.center)
            if valid:
                off = abs(u - cam.cx)
                if best_off is None or off < best_off:
                    best_off = off
                    best_cam = cam
        if best_cam is None:
            continue
        o = best_cam.center[:2]
        to_gt = cub.center[:2] - o
        norm = np.linalg.norm(to_gt)
        if norm < 1e-9:
            continue
        direction = to_gt / norm
        count = 0
        for d in dets_by_frame.get(fid, []):
            rel = d.cuboid.center[:2] - o
            t = float(rel @ direction)
            if t < 0.0 or t > max_range + 5.0:
                continue
            perp = float(np.linalg.norm(rel - t * direction))
            if perp <= corridor:
                count += 1
        counts.append(count)
    mean = float(np.mean(counts)) if counts else 0.0
    return SmearingStats(per_gt_counts=counts, mean=mean)


def bev_nms(detections, iou_thr=0.5):
    """Greedy per-frame, per-class suppression by BEV IoU."""
    by_key = {}
    for d in detections:
        by_key.setdefault((d.frame_id, d.label), []).append(d)
    kept = []
    for group in by_key.values():
        group.sort(key=lambda d: -d.score)
        chosen = []
        for d in group:
            if all(bev_iou(d.cuboid, c.cuboid) < iou_thr for c in chosen):
                chosen.append(d)
        kept.extend(chosen)
    return kept


def run_inference(model, dataset, ids, progress=None):
    """Forward pass over the given scene ids; returns raw material for the
    metrics: (detections, gts, ref_points by frame, cameras by frame)."""
    detections = []
    gts = []
    ref_points = {}
    cameras = {}
    for k, sid in enumerate(ids):
        record = dataset.load(sid)
        frame = frame_from_record(record)
        outputs, qset = model.forward(frame)
        detections.extend(decode_detections(outputs[-1], frame_id=sid))
        ref_points[sid] = qset.ref_points.data.astype(np.float64)
        cameras[sid] = frame.cameras
        gts.extend((sid, c) for c in frame.gt_cuboids)
        if progress:
            progress(k + 1, len(ids))
    return detections, gts, ref_points, cameras


def evaluate_run(model, dataset, split, config=None, label="model", progress=None):
    """Inference over a split plus the full metrics report (a plain dict)."""
    ids = dataset.scene_ids(split)
    detections, gts, ref_points, cameras = run_inference(model, dataset, ids, progress)
    return compute_report(detections, gts, ref_points, cameras, len(ids),
                          split=split, config=config, label=label)


def compute_report(detections, gts, ref_points, cameras, n_frames, split,
                   config=None, label="model"):
    config = config or EvalConfig()
    if config.use_nms:
        detections = bev_nms(detections, config.nms_iou)

    ap_iou = ap(detections, gts, matcher="iou", config=config)
    ap_cent = ap(detections, gts, matcher="centroid", config=config)
    refstats = refpoint_recall(ref_points, gts, config.refpoint_radius_m, config.max_range_m)
    smear = smearing_index(detections, gts, cameras, config.smearing_score,
                           config.smearing_corridor_m, config.max_range_m)

    relation_ok = all(
        ap_cent[cls]["ap"] >= ap_iou[cls]["ap"] - 1e-12
        for cls in ap_iou if cls in ap_cent)

    report = {
        "label": label,
        "split": split,
        "n_frames": n_frames,
        "n_detections": len(detections),
        "eval_config": config.to_dict(),
        "nms": config.use_nms,
        "ap_bev_iou": {cls: ap_iou[cls]["ap"] for cls in ap_iou},
        "ap_centroid": {cls: ap_cent[cls]["ap"] for cls in ap_cent},
        "threshold_relation_ok": bool(relation_ok),
        "refpoint_recall": refstats.recall,
        "refpoint_radius_m": refstats.radius,
        "smearing_index": smear.mean,
        "pr_curves": {
            matcher: {cls: {"thresholds": res[cls]["curve"].thresholds,
                            "recalls": res[cls]["curve"].recalls,
                            "precisions": res[cls]["curve"].precisions}
                      for cls in res}
            for matcher, res in (("iou", ap_iou), ("centroid", ap_cent))
        },
    }
    return report


def write_report(report, json_path, csv_path=None):
    with open(json_path, "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    if csv_path:
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["label", "matcher", "class", "threshold", "recall", "precision"])
            for matcher, per_cls in report["pr_curves"].items():
                for cls, curve in per_cls.items():
                    for t, r, p in zip(curve["thresholds"], curve["recalls"],
                                       curve["precisions"]):
                        writer.writerow([report["label"], matcher, cls, t, r, p])
