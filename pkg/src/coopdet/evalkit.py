"""Detection matching, average precision, center error and latency injection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import BBox, rotated_iou_bev
from .scene_sim import Frame

VARIANTS = (
    "full",
    "no-temp-fusion",
    "framewise-timestamps",
    "no-latency-augmentation",
    "no-dilation",
    "no-roi-regression",
    "no-global-attention",
)
DEFAULT_LATENCIES_MS = (0, 100, 200)
DEFAULT_IOU_THRESHOLDS = (0.5, 0.7)


class EvalError(ValueError):
    pass


@dataclass
class MatchResult:
    order: np.ndarray  # detection indices sorted by descending confidence
    tp: np.ndarray  # per detection (original order)
    confidence: np.ndarray
    gt_matched: np.ndarray


@dataclass
class EvalResult:
    ap: dict[float, float]
    precision: dict[float, list[float]] = field(default_factory=dict)
    recall: dict[float, list[float]] = field(default_factory=dict)
    center_error: float = float("nan")
    tp: dict[float, int] = field(default_factory=dict)
    fp: dict[float, int] = field(default_factory=dict)
    fn: dict[float, int] = field(default_factory=dict)
    num_gt: int = 0
    num_center_targets: int = 0

    def to_dict(self) -> dict:
        return {
            "ap": {f"{k:g}": v for k, v in self.ap.items()},
            "precision": {f"{k:g}": v for k, v in self.precision.items()},
            "recall": {f"{k:g}": v for k, v in self.recall.items()},
            "center_error": self.center_error,
            "tp": {f"{k:g}": v for k, v in self.tp.items()},
            "fp": {f"{k:g}": v for k, v in self.fp.items()},
            "fn": {f"{k:g}": v for k, v in self.fn.items()},
            "num_gt": self.num_gt,
            "num_center_targets": self.num_center_targets,
        }


def _conf_order(conf: np.ndarray) -> np.ndarray:
    # descending confidence, ties by ascending index
    return np.lexsort((np.arange(len(conf)), -conf))


def match_greedy(dets: Sequence, gts: Sequence[BBox], iou_thr: float) -> MatchResult:
    """Greedy one-to-one matching by descending confidence.

    ``dets`` holds objects with ``bbox`` and ``confidence`` attributes.  Each
    detection takes the unmatched ground truth of highest IoU (ties to the
    lower gt index) if that IoU reaches ``iou_thr``.
    """
    if not 0.0 < iou_thr < 1.0:
        raise EvalError(f"iou threshold must lie in (0, 1), got {iou_thr}")
    conf = np.array([float(d.confidence) for d in dets])
    order = _conf_order(conf)
    tp = np.zeros(len(dets), dtype=bool)
    matched = np.zeros(len(gts), dtype=bool)
    gt_xy = np.array([g.center[:2] for g in gts]).reshape(-1, 2)
    gt_reach = np.array([0.5 * math.hypot(g.dims[0], g.dims[1]) for g in gts])
    for i in order:
        b = dets[i].bbox
        reach = 0.5 * math.hypot(b.dims[0], b.dims[1])
        near = np.hypot(gt_xy[:, 0] - b.center[0], gt_xy[:, 1] - b.center[1]) < gt_reach + reach
        best, best_iou = -1, -1.0
        for g in np.nonzero(near & ~matched)[0]:
            iou = rotated_iou_bev(b, gts[g])
            if iou > best_iou:
                best, best_iou = int(g), iou
        if best >= 0 and best_iou >= iou_thr:
            tp[i] = True
            matched[best] = True
    return MatchResult(order, tp, conf, matched)


def pr_curve(confidence: np.ndarray, tp: np.ndarray, num_gt: int) -> tuple[np.ndarray, np.ndarray]:
    if num_gt < 1:
        raise EvalError("average precision needs at least one ground-truth box")
    order = _conf_order(np.asarray(confidence, dtype=float))
    hits = np.asarray(tp, dtype=float)[order]
    ctp = np.cumsum(hits)
    cfp = np.cumsum(1.0 - hits)
    recall = ctp / num_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-300)
    return precision, recall


def average_precision(confidence: np.ndarray, tp: np.ndarray, num_gt: int) -> float:
    """All-point interpolated AP over detections pooled across frames."""
    precision, recall = pr_curve(confidence, tp, num_gt)
    if len(precision) == 0:
        return 0.0
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.clip(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]), 0.0, 1.0))


def evaluate_frames(frames: Iterable[tuple[Sequence, Sequence[BBox]]],
                    iou_thresholds: Sequence[float] = DEFAULT_IOU_THRESHOLDS) -> EvalResult:
    """Pool per-frame (detections, ground truths) pairs into AP figures."""
    frames = list(frames)
    num_gt = sum(len(g) for _, g in frames)
    res = EvalResult(ap={}, num_gt=num_gt)
    for thr in iou_thresholds:
        confs, tps, n_matched = [], [], 0
        for dets, gts in frames:
            m = match_greedy(dets, gts, thr)
            confs.append(m.confidence)
            tps.append(m.tp)
            n_matched += int(m.gt_matched.sum())
        conf = np.concatenate(confs) if confs else np.zeros(0)
        tp = np.concatenate(tps) if tps else np.zeros(0, dtype=bool)
        if num_gt:
            precision, recall = pr_curve(conf, tp, num_gt)
            res.ap[thr] = average_precision(conf, tp, num_gt)
            res.precision[thr] = precision.tolist()
            res.recall[thr] = recall.tolist()
        else:
            res.ap[thr] = float("nan")
        res.tp[thr] = int(tp.sum())
        res.fp[thr] = int(len(tp) - tp.sum())
        res.fn[thr] = num_gt - n_matched
    return res


def center_errors(dets: Sequence, gt_centers: np.ndarray, radius: float = 5.0) -> np.ndarray:
    """Per target: BEV center distance to its one-to-one matched detection.

    Detections are visited most confident first (ties by index); each claims
    the nearest unclaimed target whose center lies within ``radius``.
    Targets left unclaimed score ``radius``.
    """
    gt_centers = np.asarray(gt_centers, dtype=float).reshape(-1, 2)
    out = np.full(len(gt_centers), float(radius))
    if not len(dets) or not len(gt_centers):
        return out
    xy = np.array([d.bbox.center[:2] for d in dets])
    conf = np.array([d.confidence for d in dets])
    free = np.ones(len(gt_centers), dtype=bool)
    for i in _conf_order(conf):
        dist = np.hypot(gt_centers[:, 0] - xy[i, 0], gt_centers[:, 1] - xy[i, 1])
        dist[~free] = np.inf
        j = int(np.argmin(dist))
        if dist[j] < radius:
            out[j] = dist[j]
            free[j] = False
            if not free.any():
                break
    return out


def nms_bev(dets: Sequence, iou_thr: float = 0.1, min_confidence: float = 0.0) -> list:
    """Greedy rotated-IoU suppression, most confident first."""
    keep_pool = [d for d in dets if d.confidence >= min_confidence]
    conf = np.array([d.confidence for d in keep_pool])
    kept: list = []
    for i in _conf_order(conf):
        d = keep_pool[i]
        if all(rotated_iou_bev(d.bbox, k.bbox) <= iou_thr for k in kept):
            kept.append(d)
    return kept


def inject_latency(frames: Sequence[Frame], k: int) -> list[Frame]:
    """Replace every cooperative agent's data in frame ``j`` with frame ``j-k``.

    The first ``k`` frames have no delayed partner and are dropped; ego data,
    frame indices and alignment times are unchanged.
    """
    if not (isinstance(k, (int, np.integer)) and k >= 0):
        raise EvalError(f"latency must be a non-negative frame count, got {k}")
    frames = list(frames)
    if k == 0:
        return frames
    if k >= len(frames):
        raise EvalError(f"latency of {k} frames exceeds sequence length {len(frames)}")
    out = []
    for j in range(k, len(frames)):
        cur, old = frames[j], frames[j - k]
        clouds = {a: (cur.clouds[a] if a == cur.ego_id else old.clouds[a]) for a in cur.clouds}
        states = {a: (cur.states[a] if a == cur.ego_id else old.states[a]) for a in cur.states}
        out.append(replace(cur, clouds=clouds, states=states))
    return out


def latency_frames(ms: float, frequency: float) -> int:
    k = ms * 1e-3 * frequency
    if abs(k - round(k)) > 1e-9 or k < 0:
        raise EvalError(f"latency {ms} ms is not a whole number of frames at {frequency} Hz")
    return int(round(k))


def ablate(variants: Sequence[str], latencies_ms: Sequence[float] = DEFAULT_LATENCIES_MS,
           train_config=None, scenario=None, progress=None,
           iou_thresholds: Sequence[float] = ()) -> dict[str, dict[float, EvalResult]]:
    """Train each variant once, then evaluate it under every latency."""
    from .training import TrainConfig, evaluate, prepare_scenes, train_toy, variant_config

    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise EvalError(f"unknown variant(s) {unknown}; expected some of {VARIANTS}")
    base = train_config or TrainConfig()
    if scenario is not None:
        base = replace(base, scenario=scenario)
    table: dict[str, dict[float, EvalResult]] = {}
    for v in variants:
        cfg = variant_config(base, v)
        result = train_toy(cfg)
        held_out = prepare_scenes(cfg.scenario, cfg.eval_seeds())
        table[v] = {}
        for ms in latencies_ms:
            k = latency_frames(ms, cfg.scenario.frequency)
            table[v][ms] = evaluate(result.params, held_out, cfg, latency=k,
                                     iou_thresholds=iou_thresholds)
            if progress is not None:
                progress(v, ms, table[v][ms])
    return table


def format_table(table: dict[str, dict[float, EvalResult]], iou: Optional[float] = None) -> str:
    lat = sorted({ms for row in table.values() for ms in row})
    head = "variant".ljust(26) + "".join(f"{f'{ms:g}ms':>12}" for ms in lat)
    lines = [head]
    for v, row in table.items():
        cells = []
        for ms in lat:
            r = row.get(ms)
            if r is None:
                cells.append(f"{'-':>12}")
            elif iou is None:
                cells.append(f"{r.center_error:12.3f}")
            else:
                cells.append(f"{r.ap.get(iou, float('nan')):12.3f}")
        lines.append(v.ljust(26) + "".join(cells))
    return "\n".join(lines)
