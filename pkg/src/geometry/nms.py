"""
Greedy class-wise non-maximum suppression
"""

import logging
from typing import List, Optional

import torch

from src.errors import DomainError
from src.geometry.boxes import Detection, box_cxcywh_to_xyxy, box_iou

logger = logging.getLogger(__name__)


def nms_indices(boxes_xyxy: torch.Tensor, scores: torch.Tensor, labels: torch.Tensor,
                iou_threshold: float) -> torch.Tensor:
    """
    Indices of kept boxes, sorted by score descending.
    A box is dropped iff a higher-scoring kept box of the same label
    overlaps it with IoU > iou_threshold. Ties keep the lower index first.
    """
    if not (0 < iou_threshold <= 1):
        raise DomainError(f"NMS threshold must be in (0, 1], got {iou_threshold}")
    if scores.numel() == 0:
        return torch.zeros(0, dtype=torch.long)

    order = torch.sort(-scores.detach().double(), stable=True).indices
    keep = []
    for label in torch.unique(labels):
        members = order[labels[order] == label]
        ious = box_iou(boxes_xyxy[members].detach().double(), boxes_xyxy[members].detach().double())
        suppressed = torch.zeros(len(members), dtype=torch.bool)
        for i in range(len(members)):
            if suppressed[i]:
                continue
            keep.append(int(members[i]))
            suppressed |= ious[i] > iou_threshold
    keep = torch.tensor(keep, dtype=torch.long)
    # restore global score order with index tie-break
    rank = torch.empty_like(order)
    rank[order] = torch.arange(len(order))
    return keep[torch.argsort(rank[keep])]


def nms(dets: List[Detection], iou_threshold: float,
        score_floor: Optional[float] = None) -> List[Detection]:
    """Class-wise greedy NMS over Detection objects; optional score floor"""
    if score_floor is not None:
        dets = [d for d in dets if d.score >= score_floor]
    if not dets:
        return []
    boxes = box_cxcywh_to_xyxy(torch.tensor([d.box.as_list() for d in dets], dtype=torch.float64))
    scores = torch.tensor([d.score for d in dets], dtype=torch.float64)
    labels = torch.tensor([d.category for d in dets], dtype=torch.long)
    keep = nms_indices(boxes, scores, labels, iou_threshold)
    logger.debug(f"NMS kept {len(keep)}/{len(dets)} detections")
    return [dets[i] for i in keep.tolist()]
