"""Turn frame scores into segments and score them.

A three-class toy video: the prediction finds both actions but starts the
second one two frames late.

    python3 demos/segment_metrics.py
"""
import numpy as np

from duoclr import SegmentAnnotation, frame_accuracy, frames_to_segments, map_at_iou, mean_iou

truth = np.array([0] * 10 + [2] * 10)
pred = np.array([0] * 12 + [2] * 8)
scores = np.eye(3)[pred] * 0.8 + 0.1

segments = frames_to_segments(scores)
for s in segments:
    print(f"class {s.action_class}: frames [{s.start}, {s.end}) confidence {s.confidence:.2f}")

reference = {0: [SegmentAnnotation(0, 0, 10), SegmentAnnotation(2, 10, 20)]}
detections = {0: segments}
for threshold in (0.1, 0.5, 0.9):
    print(f"mAP@{threshold}: {map_at_iou(detections, reference, threshold):.3f}")
print(f"frame accuracy {frame_accuracy(pred, truth):.3f}, mIoU {mean_iou(pred, truth):.3f}")
