"""
COCO-style box AP in numpy.

Per class, per area range and per IoU threshold, detections are matched
greedily in score order (each GT at most once), precision is made
monotone and read off at 101 recall points. Areas are box areas in
pixels; the small/medium/large split is at 32^2 and 96^2.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping

import numpy as np

from src.data.records import DetectionDataset
from src.errors import EvaluationError
from src.geometry.boxes import Detection

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = np.round(np.arange(10) * 0.05 + 0.5, 2)
RECALL_THRESHOLDS = np.arange(101) / 100.0
AREA_RANGES = {
    'all': (0.0, 1e10),
    'small': (0.0, 32.0 ** 2),
    'medium': (32.0 ** 2, 96.0 ** 2),
    'large': (96.0 ** 2, 1e10),
}
MAX_DETS = 100


@dataclass
class EvalReport:
    AP: float = 0.0
    AP50: float = 0.0
    AP75: float = 0.0
    APs: float = 0.0
    APm: float = 0.0
    APl: float = 0.0
    per_class: Dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> Dict:
        return {
            'AP': self.AP, 'AP50': self.AP50, 'AP75': self.AP75,
            'APs': self.APs, 'APm': self.APm, 'APl': self.APl,
            'per_class': dict(self.per_class),
        }

    def table(self) -> str:
        lines = [f"{'metric':<10}{'value':>8}"]
        for name in ('AP', 'AP50', 'AP75', 'APs', 'APm', 'APl'):
            lines.append(f"{name:<10}{getattr(self, name):>8.4f}")
        for name, value in self.per_class.items():
            lines.append(f"{'AP[' + name + ']':<10}{value:>8.4f}")
        return '\n'.join(lines)


def iou_matrix(dets: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """(D, 4) x (G, 4) pixel xywh -> (D, G) IoU"""
    if len(dets) == 0 or len(gts) == 0:
        return np.zeros((len(dets), len(gts)))
    d1, d2 = dets[:, None, :2], dets[:, None, :2] + dets[:, None, 2:]
    g1, g2 = gts[None, :, :2], gts[None, :, :2] + gts[None, :, 2:]
    wh = np.clip(np.minimum(d2, g2) - np.maximum(d1, g1), 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = (dets[:, 2] * dets[:, 3])[:, None] + (gts[:, 2] * gts[:, 3])[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _to_pixels(boxes: np.ndarray, width: int, height: int) -> np.ndarray:
    """normalized cxcywh -> pixel xywh"""
    if len(boxes) == 0:
        return np.zeros((0, 4))
    scale = np.array([width, height, width, height], dtype=np.float64)
    px = boxes * scale
    return np.stack([px[:, 0] - px[:, 2] / 2, px[:, 1] - px[:, 3] / 2, px[:, 2], px[:, 3]], axis=1)


def _match_image(det_boxes, det_scores, gt_boxes, area_range):
    """
    Greedy matching for one (image, class, area range).
    Returns scores, (thr, D) matched flags, (thr, D) ignore flags, #non-ignored GT.
    """
    lo, hi = area_range
    gt_area = gt_boxes[:, 2] * gt_boxes[:, 3]
    gt_ignore = (gt_area < lo) | (gt_area > hi)
    gt_order = np.argsort(gt_ignore, kind='stable')
    gt_boxes, gt_ignore = gt_boxes[gt_order], gt_ignore[gt_order]

    det_order = np.argsort(-det_scores, kind='stable')[:MAX_DETS]
    det_boxes, det_scores = det_boxes[det_order], det_scores[det_order]
    det_area = det_boxes[:, 2] * det_boxes[:, 3]

    ious = iou_matrix(det_boxes, gt_boxes)
    num_thr, num_det, num_gt = len(IOU_THRESHOLDS), len(det_boxes), len(gt_boxes)
    det_matched = np.zeros((num_thr, num_det), dtype=bool)
    det_ignore = np.zeros((num_thr, num_det), dtype=bool)

    for ti, thr in enumerate(IOU_THRESHOLDS):
        gt_taken = np.zeros(num_gt, dtype=bool)
        for d in range(num_det):
            best_iou = min(thr, 1 - 1e-10)
            best = -1
            for g in range(num_gt):
                if gt_taken[g]:
                    continue
                # non-ignored GT come first; stop once only ignored ones remain
                if best > -1 and not gt_ignore[best] and gt_ignore[g]:
                    break
                if ious[d, g] < best_iou:
                    continue
                best_iou = ious[d, g]
                best = g
            if best == -1:
                continue
            gt_taken[best] = True
            det_matched[ti, d] = True
            det_ignore[ti, d] = gt_ignore[best]
        outside = (det_area < lo) | (det_area > hi)
        det_ignore[ti] |= ~det_matched[ti] & outside

    return det_scores, det_matched, det_ignore, int((~gt_ignore).sum())


def _precision_at_recalls(scores, matched, ignore, num_positive) -> np.ndarray:
    """(thr, 101) interpolated precision; -1 rows when there is no positive GT"""
    out = -np.ones((len(IOU_THRESHOLDS), len(RECALL_THRESHOLDS)))
    if num_positive == 0:
        return out
    order = np.argsort(-scores, kind='stable')
    matched, ignore = matched[:, order], ignore[:, order]
    for ti in range(len(IOU_THRESHOLDS)):
        keep = ~ignore[ti]
        tp = np.cumsum(matched[ti][keep]).astype(np.float64)
        fp = np.cumsum(~matched[ti][keep]).astype(np.float64)
        q = np.zeros(len(RECALL_THRESHOLDS))
        if len(tp):
            recall = tp / num_positive
            precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
            precision = np.maximum.accumulate(precision[::-1])[::-1]
            idx = np.searchsorted(recall, RECALL_THRESHOLDS, side='left')
            valid = idx < len(recall)
            q[valid] = precision[idx[valid]]
        out[ti] = q
    return out


def _mean_valid(values: np.ndarray) -> float:
    valid = values[values > -1]
    return float(valid.mean()) if valid.size else 0.0


def evaluate(detections: Mapping[int, List[Detection]], ground_truth: DetectionDataset) -> EvalReport:
    """
    AP report for detections keyed by image id (normalized boxes,
    dense category indices) against the dataset's ground truth.
    Images without an entry count as having no detections.
    """
    for image_id in detections:
        if not ground_truth.has_image(image_id):
            raise EvaluationError(f"detections reference unknown image id {image_id}")

    num_classes = ground_truth.num_classes
    # precision[class, area, thr, recall]
    precision = -np.ones((num_classes, len(AREA_RANGES), len(IOU_THRESHOLDS), len(RECALL_THRESHOLDS)))

    for c in range(num_classes):
        for ai, area_range in enumerate(AREA_RANGES.values()):
            scores, matched, ignore = [], [], []
            num_positive = 0
            for record in ground_truth:
                gts = _to_pixels(record.boxes[record.labels == c], record.width, record.height)
                dets = [d for d in detections.get(record.image_id, []) if d.category == c]
                if not len(gts) and not dets:
                    continue
                det_boxes = _to_pixels(np.array([d.box.as_list() for d in dets]).reshape(-1, 4),
                                       record.width, record.height)
                det_scores = np.array([d.score for d in dets], dtype=np.float64)
                s, m, ig, npos = _match_image(det_boxes, det_scores, gts, area_range)
                scores.append(s)
                matched.append(m)
                ignore.append(ig)
                num_positive += npos
            if not scores:
                continue
            precision[c, ai] = _precision_at_recalls(np.concatenate(scores),
                                                     np.concatenate(matched, axis=1),
                                                     np.concatenate(ignore, axis=1),
                                                     num_positive)

    thr50 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.5)))
    thr75 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.75)))
    report = EvalReport(
        AP=_mean_valid(precision[:, 0]),
        AP50=_mean_valid(precision[:, 0, thr50]),
        AP75=_mean_valid(precision[:, 0, thr75]),
        APs=_mean_valid(precision[:, 1]),
        APm=_mean_valid(precision[:, 2]),
        APl=_mean_valid(precision[:, 3]),
        per_class={name: _mean_valid(precision[c, 0]) for c, name in enumerate(ground_truth.categories)},
    )
    logger.info(f"📊 AP {report.AP:.4f} | AP50 {report.AP50:.4f} | AP75 {report.AP75:.4f}")
    return report
