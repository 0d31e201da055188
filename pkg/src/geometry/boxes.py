"""
Box representation, coordinate transforms and IoU/GIoU.

Clean boxes live in normalized (cx, cy, w, h) form in [0, 1]. The
diffusion state lives in signal space, each coordinate mapped affinely
to [-1, 1]. Tensor helpers accept any leading shape and work in the
dtype they are given.
"""

from dataclasses import dataclass
from typing import List, Sequence, Union

import torch

BoxLike = Union['Box', Sequence[float], torch.Tensor]


@dataclass(frozen=True)
class Box:
    """One object hypothesis as normalized center/size coordinates"""

    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> 'Box':
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def to_xyxy(self) -> List[float]:
        return [self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2]

    def as_list(self) -> List[float]:
        return [self.cx, self.cy, self.w, self.h]

    @property
    def area(self) -> float:
        return max(self.w, 0.0) * max(self.h, 0.0)


@dataclass(frozen=True)
class Detection:
    """A scored, classified box"""

    box: Box
    category: int
    score: float


def as_tensor(boxes: BoxLike, dtype=torch.float64) -> torch.Tensor:
    if isinstance(boxes, Box):
        return torch.tensor(boxes.as_list(), dtype=dtype)
    if isinstance(boxes, torch.Tensor):
        return boxes
    return torch.as_tensor(boxes, dtype=dtype)


def box_cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)


def to_signal_space(boxes: BoxLike) -> torch.Tensor:
    """Map normalized cxcywh coordinates from [0, 1] to [-1, 1]"""
    return as_tensor(boxes) * 2.0 - 1.0


def from_signal_space(signal: torch.Tensor) -> torch.Tensor:
    """Clamp to [-1, 1] and map back to normalized cxcywh, w and h floored at 0"""
    boxes = (signal.clamp(-1.0, 1.0) + 1.0) / 2.0
    cxcy, wh = boxes[..., :2], boxes[..., 2:].clamp(min=0.0)
    return torch.cat([cxcy, wh], dim=-1)


def box_area(xyxy: torch.Tensor) -> torch.Tensor:
    wh = (xyxy[..., 2:] - xyxy[..., :2]).clamp(min=0)
    return wh[..., 0] * wh[..., 1]


def _safe_div(num: torch.Tensor, den: torch.Tensor) -> torch.Tensor:
    positive = den > 0
    return torch.where(positive, num / torch.where(positive, den, torch.ones_like(den)),
                       torch.zeros_like(num))


def _iou_terms(a: torch.Tensor, b: torch.Tensor):
    """Intersection, union and hull areas of broadcast-compatible xyxy boxes"""
    area_a = box_area(a)
    area_b = box_area(b)
    lt = torch.max(a[..., :2], b[..., :2])
    rb = torch.min(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    hull_lt = torch.min(a[..., :2], b[..., :2])
    hull_rb = torch.max(a[..., 2:], b[..., 2:])
    hull_wh = (hull_rb - hull_lt).clamp(min=0)
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    return inter, union, hull


def elementwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    inter, union, _ = _iou_terms(a, b)
    return _safe_div(inter, union)


def elementwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """GIoU of aligned xyxy boxes; 0 where both boxes are degenerate"""
    inter, union, hull = _iou_terms(a, b)
    iou = _safe_div(inter, union)
    giou = iou - _safe_div(hull - union, hull)
    return torch.where(union > 0, giou, torch.zeros_like(giou))


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU, (N, 4) x (M, 4) xyxy -> (N, M)"""
    return elementwise_iou(a[:, None, :], b[None, :, :])


def generalized_box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise GIoU, (N, 4) x (M, 4) xyxy -> (N, M)"""
    return elementwise_giou(a[:, None, :], b[None, :, :])


def giou(a: Box, b: Box) -> float:
    ta = box_cxcywh_to_xyxy(as_tensor(a))
    tb = box_cxcywh_to_xyxy(as_tensor(b))
    return float(elementwise_giou(ta, tb))


def iou(a: Box, b: Box) -> float:
    ta = box_cxcywh_to_xyxy(as_tensor(a))
    tb = box_cxcywh_to_xyxy(as_tensor(b))
    return float(elementwise_iou(ta, tb))


def coco_bbox_to_box(bbox: Sequence[float], width: float, height: float) -> Box:
    """COCO [x, y, w, h] pixels -> normalized cxcywh"""
    x, y, w, h = bbox
    return Box((x + w / 2) / width, (y + h / 2) / height, w / width, h / height)


def box_to_coco_bbox(box: Box, width: float, height: float) -> List[float]:
    """Normalized cxcywh -> COCO [x, y, w, h] pixels"""
    w = box.w * width
    h = box.h * height
    return [box.cx * width - w / 2, box.cy * height - h / 2, w, h]
