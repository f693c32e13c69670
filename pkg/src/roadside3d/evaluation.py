"""Detection evaluation.

Multi-view protocol (nuScenes style): per-class greedy matching on BEV
center distance, AP over a set of distance thresholds, true-positive errors
at a fixed threshold, and the NDS aggregate. Monocular protocol: AP over 40
recall points with 3D IoU matching.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import VEHICLE_CLASSES, Box3D, Clip, DataError, Detection, InvariantError
from .polygeo import iou3d

log = logging.getLogger(__name__)

TP_METRICS = ("ate", "ase", "aoe", "ave", "aae")


@dataclass(frozen=True)
class EvalConfig:
    dist_thresholds: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    tp_threshold: float = 2.0
    tp_metrics: tuple[str, ...] = TP_METRICS
    max_boxes_per_sample: int = 500
    score_floor: float = 0.0
    min_recall: float = 0.1
    min_precision: float = 0.1

    def __post_init__(self):
        th = tuple(float(t) for t in self.dist_thresholds)
        if not th or any(t <= 0 for t in th) or any(b <= a for a, b in zip(th, th[1:])):
            raise InvariantError("dist_thresholds", "must be positive and strictly ascending")
        object.__setattr__(self, "dist_thresholds", th)
        if float(self.tp_threshold) not in th:
            raise InvariantError("tp_threshold", "must be one of the distance thresholds")
        metrics = tuple(m.lower() for m in self.tp_metrics)
        unknown = [m for m in metrics if m not in TP_METRICS]
        if unknown:
            raise InvariantError("tp_metrics", f"unknown metrics {unknown}")
        object.__setattr__(self, "tp_metrics", metrics)


@dataclass
class Match:
    det: Detection
    gt: Box3D
    distance: float
    key: object = None


@dataclass
class MatchResult:
    matches: list[Match]
    false_positives: list[Detection]
    missed: list[Box3D]
    tp: np.ndarray  # 1/0 per detection, in processing (descending score) order
    scores: np.ndarray
    npos: int


def _as_mapping(boxes) -> Mapping:
    return boxes if isinstance(boxes, Mapping) else {None: list(boxes)}


def _det_order_key(key, d: Detection):
    return (-d.score, str(key), d.center, d.size, d.yaw)


def bev_distance(a: Box3D, b: Box3D) -> float:
    return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])


def match_detections(gts, dets, threshold: float) -> MatchResult:
    """Greedy matching, highest score first, to the nearest unmatched GT whose
    BEV center distance is below ``threshold``.

    ``gts``/``dets`` are either flat lists (one sample) or mappings from a
    sample key to lists. Call once per class.
    """
    gts, dets = _as_mapping(gts), _as_mapping(dets)
    unknown = set(dets) - set(gts)
    if unknown:
        raise DataError(f"detections reference unknown samples: {sorted(map(str, unknown))[:5]}")
    order = sorted(((k, d) for k, ds in dets.items() for d in ds), key=lambda kd: _det_order_key(*kd))
    centers = {k: np.array([g.center[:2] for g in v]).reshape(-1, 2) for k, v in gts.items()}
    taken = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    matches, fps = [], []
    tp = np.zeros(len(order))
    for n, (k, d) in enumerate(order):
        c = centers[k]
        if len(c):
            dist = np.hypot(c[:, 0] - d.center[0], c[:, 1] - d.center[1])
            dist[taken[k]] = np.inf
            j = int(np.argmin(dist))
            if dist[j] < threshold:
                taken[k][j] = True
                tp[n] = 1
                matches.append(Match(d, gts[k][j], float(dist[j]), k))
                continue
        fps.append(d)
    missed = [g for k, v in gts.items() for g, t in zip(v, taken[k]) if not t]
    npos = sum(len(v) for v in gts.values())
    return MatchResult(matches, fps, missed, tp, np.array([d.score for _, d in order]), npos)


def _filter_class(boxes: Mapping, cls: str) -> dict:
    return {k: [b for b in v if b.cls == cls] for k, v in boxes.items()}


def ap_from_matches(result: MatchResult, min_recall: float = 0.1, min_precision: float = 0.1) -> float:
    """101-point interpolated AP with the low-recall / low-precision clipping."""
    if result.npos == 0:
        return math.nan
    if len(result.tp) == 0:
        return 0.0
    tp = np.cumsum(result.tp)
    fp = np.cumsum(1 - result.tp)
    prec = tp / (tp + fp)
    rec = tp / result.npos
    prec = np.interp(np.linspace(0, 1, 101), rec, prec, right=0)
    prec = prec[round(100 * min_recall) + 1:] - min_precision
    prec[prec < 0] = 0
    return float(min(1.0, np.mean(prec) / (1 - min_precision)))


def average_precision(gts, dets, cls: str, threshold: float, min_recall: float = 0.1,
                      min_precision: float = 0.1) -> float:
    """AP for one class at one distance threshold; NaN when the class has no GT."""
    gts, dets = _as_mapping(gts), _as_mapping(dets)
    res = match_detections(_filter_class(gts, cls), _filter_class(dets, cls), threshold)
    return ap_from_matches(res, min_recall, min_precision)


def yaw_difference(a: float, b: float) -> float:
    return abs(math.remainder(a - b, 2 * math.pi))


def aligned_iou(a: Box3D, b: Box3D) -> float:
    inter = float(np.prod(np.minimum(a.size, b.size)))
    return inter / (a.volume + b.volume - inter)


def tp_errors(matches: Sequence[Match]) -> dict[str, float]:
    """Mean TP errors; each is 1.0 when there are no matches (or no data for it)."""
    if not matches:
        return {m: 1.0 for m in TP_METRICS}
    ate = float(np.mean([bev_distance(m.det, m.gt) for m in matches]))
    ase = float(np.mean([1 - aligned_iou(m.det, m.gt) for m in matches]))
    aoe = float(np.mean([yaw_difference(m.det.yaw, m.gt.yaw) for m in matches]))
    vel = [math.dist(m.det.velocity, m.gt.velocity) for m in matches
           if m.det.velocity is not None and m.gt.velocity is not None]
    att = [float(m.det.attribute != m.gt.attribute) for m in matches
           if m.det.attribute is not None and m.gt.attribute is not None]
    return {"ate": ate, "ase": ase, "aoe": aoe,
            "ave": float(np.mean(vel)) if vel else 1.0,
            "aae": float(np.mean(att)) if att else 1.0}


def nds(mean_ap: float, tp: Mapping[str, float], config: EvalConfig | None = None) -> float:
    """Weighted mean of mAP (weight 5) and the bounded TP scores (weight 1 each)."""
    cfg = config or EvalConfig()
    tp_score = sum(1 - min(1.0, tp[m]) for m in cfg.tp_metrics)
    return float((5 * mean_ap + tp_score) / (5 + len(cfg.tp_metrics)))


@dataclass
class ClassResult:
    ap: dict[str, float]
    tp_errors: dict[str, float]
    num_gt: int


@dataclass
class EvalResult:
    nds: float
    mean_ap: float
    tp_errors: dict[str, float]  # class-averaged mATE, mASE, ...
    per_class: dict[str, ClassResult]
    config: EvalConfig
    skipped_classes: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        out = {"nds": self.nds, "map": self.mean_ap}
        for m in TP_METRICS:
            if m in self.config.tp_metrics or m in ("ate", "ase", "aoe"):
                out[f"m{m}"] = self.tp_errors[m]
        out["per_class"] = {c: {"ap": r.ap, **r.tp_errors, "num_gt": r.num_gt}
                            for c, r in self.per_class.items()}
        out["skipped_classes"] = self.skipped_classes
        out["config"] = asdict(self.config)
        return out


def _sample_dict(clips: Sequence[Clip]) -> dict:
    out = {}
    for clip in clips:
        for i, s in enumerate(clip.samples):
            out[(clip.id, i)] = list(s.boxes)
    return out


def prepare_detections(dets: Mapping, config: EvalConfig) -> dict:
    out = {}
    for k, v in dets.items():
        v = [d for d in v if d.score >= config.score_floor]
        if len(v) > config.max_boxes_per_sample:
            log.warning("sample %s has %d detections; keeping the top %d by score",
                        k, len(v), config.max_boxes_per_sample)
            v = sorted(v, key=lambda d: _det_order_key(k, d))[:config.max_boxes_per_sample]
        out[k] = v
    return out


def evaluate_samples(gts: Mapping, dets: Mapping, config: EvalConfig | None = None) -> EvalResult:
    cfg = config or EvalConfig()
    unknown = set(dets) - set(gts)
    if unknown:
        raise DataError(f"detections reference samples missing from the ground truth: "
                        f"{sorted(map(str, unknown))[:5]}")
    dets = prepare_detections(dets, cfg)
    dets = {k: [d if isinstance(d, Detection) else Detection.from_box(d) for d in dets.get(k, [])]
            for k in gts}
    per_class, skipped = {}, []
    for cls in VEHICLE_CLASSES:
        g = _filter_class(gts, cls)
        num_gt = sum(len(v) for v in g.values())
        if num_gt == 0:
            skipped.append(cls)
            continue
        d = _filter_class(dets, cls)
        aps, tp = {}, None
        for th in cfg.dist_thresholds:
            res = match_detections(g, d, th)
            aps[f"{th:g}"] = ap_from_matches(res, cfg.min_recall, cfg.min_precision)
            if th == cfg.tp_threshold:
                tp = tp_errors(res.matches)
        per_class[cls] = ClassResult(aps, tp, num_gt)
    if not per_class:
        raise DataError("ground truth contains no boxes")
    mean_ap = float(np.mean([np.mean(list(r.ap.values())) for r in per_class.values()]))
    mtp = {m: float(np.mean([r.tp_errors[m] for r in per_class.values()])) for m in TP_METRICS}
    return EvalResult(nds(mean_ap, mtp, cfg), mean_ap, mtp, per_class, cfg, skipped)


def evaluate(gt_clips: Sequence[Clip], det_clips: Sequence[Clip],
             config: EvalConfig | None = None) -> EvalResult:
    """Full multi-view evaluation keyed by (clip id, sample index)."""
    return evaluate_samples(_sample_dict(gt_clips), _sample_dict(det_clips), config)


# ---------------------------------------------------------------------------
# monocular AP40


@dataclass(frozen=True)
class Mono3DConfig:
    score_floor: float = 0.1
    max_dets_per_image: int = 300
    recall_points: int = 40


def ap40(gts, dets, iou_threshold: float, cls: str | None = None, ignored=None,
         config: Mono3DConfig | None = None) -> float:
    """KITTI-style AP|R40 with greedy 3D-IoU matching, highest score first.

    ``gts``/``dets`` map an image key to boxes (a flat list means one image).
    Detections must match a GT of the same class. ``ignored`` optionally maps
    image keys to GT boxes that neither count as positives nor turn matching
    detections into false positives. Returns NaN without positives.
    """
    cfg = config or Mono3DConfig()
    gts, dets = _as_mapping(gts), _as_mapping(dets)
    ignored = _as_mapping(ignored) if ignored is not None else {}
    if cls is not None:
        gts, dets = _filter_class(gts, cls), _filter_class(dets, cls)
        ignored = _filter_class(ignored, cls)
    npos = sum(len(v) for v in gts.values())
    if npos == 0:
        return math.nan
    pool = []
    for k, v in dets.items():
        v = sorted((d for d in v if d.score >= cfg.score_floor), key=lambda d: _det_order_key(k, d))
        pool.extend((k, d) for d in v[:cfg.max_dets_per_image])
    pool.sort(key=lambda kd: _det_order_key(*kd))
    taken = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    taken_ign = {k: np.zeros(len(v), dtype=bool) for k, v in ignored.items()}
    flags = []
    for k, d in pool:
        best, best_j = -1.0, -1
        for j, g in enumerate(gts.get(k, [])):
            if taken[k][j] or g.cls != d.cls:
                continue
            iou = iou3d(d, g)
            if iou >= iou_threshold and iou > best:
                best, best_j = iou, j
        if best_j >= 0:
            taken[k][best_j] = True
            flags.append(1)
            continue
        skip = False
        for j, g in enumerate(ignored.get(k, [])):
            if not taken_ign[k][j] and g.cls == d.cls and iou3d(d, g) >= iou_threshold:
                taken_ign[k][j] = True
                skip = True
                break
        if not skip:
            flags.append(0)
    if not flags:
        return 0.0
    flags = np.array(flags)
    tp = np.cumsum(flags)
    prec = tp / np.arange(1, len(flags) + 1)
    envelope = np.maximum.accumulate(prec[::-1])[::-1]
    n = cfg.recall_points
    total = 0.0
    for i in range(1, n + 1):
        # first position whose recall tp/npos reaches i/n (integer arithmetic)
        idx = np.flatnonzero(tp * n >= i * npos)
        if len(idx):
            total += envelope[idx[0]]
    return float(total / n)
