"""Temporal segmentation metrics: segmental mAP@IoU, frame accuracy, mIoU, per-frame mAP."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ScoredSegment:
    action_class: int
    start: int
    end: int
    confidence: float

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError("segment must be non-empty")


def frames_to_segments(scores, background: int | None = None) -> list[ScoredSegment]:
    """Maximal runs of equal argmax labels, scored by the mean winning probability.

    Runs labelled ``background`` are dropped.
    """
    scores = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    labels = scores.argmax(axis=1)
    out = []
    start = 0
    for t in range(1, len(labels) + 1):
        if t == len(labels) or labels[t] != labels[start]:
            cls = int(labels[start])
            if cls != background:
                conf = float(scores[start:t, cls].mean())
                out.append(ScoredSegment(cls, start, t, conf))
            start = t
    return out


def segment_iou(a, b) -> float:
    """IoU of half-open frame spans ``(start, end)``."""
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def average_precision(tp: np.ndarray, num_positives: int) -> float:
    """All-points AP from a ranked hit vector, using the monotone precision envelope."""
    if num_positives == 0:
        raise ValueError("AP needs at least one positive")
    tp = np.asarray(tp, dtype=np.float64)
    if len(tp) == 0:
        return 0.0
    hits = np.cumsum(tp)
    precision = hits / np.arange(1, len(tp) + 1)
    recall = hits / num_positives
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mprec = np.maximum.accumulate(mprec[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mprec[steps]))


def _span(seg):
    return (seg.start, seg.end)


def map_at_iou(preds: dict, gts: dict, threshold: float) -> float:
    """Segmental mAP at one IoU threshold.

    ``preds`` and ``gts`` map video ids to lists of ``ScoredSegment`` and
    ``SegmentAnnotation``. Per class, predictions from all videos are ranked
    by confidence (ties: earlier start, then video id) and each is matched to
    the unmatched same-video ground truth of highest IoU, if that IoU reaches
    ``threshold``.
    """
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    gt_by_class = defaultdict(list)
    for vid, segs in gts.items():
        for s in segs:
            gt_by_class[s.action_class].append((vid, s))
    if not gt_by_class:
        raise ValueError("empty reference")
    pred_by_class = defaultdict(list)
    for vid, segs in preds.items():
        for s in segs:
            pred_by_class[s.action_class].append((vid, s))

    aps = []
    for cls, gt_list in sorted(gt_by_class.items()):
        ranked = sorted(pred_by_class.get(cls, []),
                        key=lambda item: (-item[1].confidence, item[1].start, item[0]))
        matched = set()
        tp = np.zeros(len(ranked))
        for r, (vid, p) in enumerate(ranked):
            best, best_iou = None, -1.0
            for g_idx, (gvid, g) in enumerate(gt_list):
                if gvid != vid or g_idx in matched:
                    continue
                iou = segment_iou(_span(p), _span(g))
                if iou > best_iou:
                    best, best_iou = g_idx, iou
            if best is not None and best_iou >= threshold:
                matched.add(best)
                tp[r] = 1
        aps.append(average_precision(tp, len(gt_list)))
    return float(np.mean(aps))


def _pooled(labels) -> np.ndarray:
    if isinstance(labels, (list, tuple)) and labels and np.ndim(labels[0]) >= 1:
        return np.concatenate([np.asarray(x) for x in labels])
    return np.asarray(labels)


def frame_accuracy(pred_labels, gt_labels) -> float:
    """Fraction of frames (pooled over videos) whose predicted class is correct."""
    p, g = _pooled(pred_labels), _pooled(gt_labels)
    if p.shape != g.shape or len(g) == 0:
        raise ValueError("prediction and reference frame counts differ")
    return float(np.mean(p == g))


def mean_iou(pred_labels, gt_labels, num_classes: int | None = None) -> float:
    """Mean per-class frame IoU over classes present in the reference."""
    p, g = _pooled(pred_labels), _pooled(gt_labels)
    if p.shape != g.shape or len(g) == 0:
        raise ValueError("prediction and reference frame counts differ")
    classes = np.unique(g) if num_classes is None else [k for k in range(num_classes) if np.any(g == k)]
    ious = []
    for k in classes:
        inter = np.sum((p == k) & (g == k))
        union = np.sum((p == k) | (g == k))
        ious.append(inter / union)
    return float(np.mean(ious))


def per_frame_map(scores, relevance) -> float:
    """Mean over classes (with a positive frame) of the frame-ranking AP.

    Frames are ranked by descending score; ties keep frame order.
    """
    s = _pooled(scores).astype(np.float64)
    r = _pooled(relevance).astype(bool)
    if s.ndim == 1:
        s, r = s[:, None], r[:, None]
    if s.shape != r.shape:
        raise ValueError("score and relevance shapes differ")
    aps = []
    for k in range(s.shape[1]):
        pos = int(r[:, k].sum())
        if pos == 0:
            continue
        order = np.argsort(-s[:, k], kind="stable")
        aps.append(average_precision(r[order, k], pos))
    if not aps:
        raise ValueError("empty reference")
    return float(np.mean(aps))


# -- reports ----------------------------------------------------------------------

def multiclass_report(scores_by_video: dict, videos: dict, num_classes: int) -> dict:
    """Segmental mAP@0.1/0.5, accuracy and mIoU for multiclass predictions."""
    from .segmentation import frame_labels_from_annotations

    preds, gts, p_lab, g_lab = {}, {}, [], []
    for vid in sorted(videos):
        scores = scores_by_video[vid]
        preds[vid] = frames_to_segments(scores, background=num_classes)
        gts[vid] = videos[vid].segments
        p_lab.append(scores.argmax(axis=1))
        g_lab.append(frame_labels_from_annotations(videos[vid], num_classes).argmax(axis=1))
    return {
        "mAP@0.1": map_at_iou(preds, gts, 0.1),
        "mAP@0.5": map_at_iou(preds, gts, 0.5),
        "Acc": frame_accuracy(p_lab, g_lab),
        "mIoU": mean_iou(p_lab, g_lab),
    }


def multilabel_report(scores_by_video: dict, videos: dict, num_classes: int) -> dict:
    from .segmentation import frame_labels_from_annotations

    vids = sorted(videos)
    s = [scores_by_video[v] for v in vids]
    r = [frame_labels_from_annotations(videos[v], num_classes) for v in vids]
    return {"per-frame mAP": per_frame_map(s, r)}


def write_report(path, metrics: dict, split: str = "test", extra: dict | None = None) -> None:
    """JSON report with 6-decimal values plus a CSV mirror (``metric,split,value``)."""
    doc = {k: round(float(v), 6) for k, v in metrics.items()}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    csv_path = str(path)[:-5] + ".csv" if str(path).endswith(".json") else str(path) + ".csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "split", "value"])
        for k in sorted(metrics):
            w.writerow([k, split, f"{round(float(metrics[k]), 6):.6f}"])
