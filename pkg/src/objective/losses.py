"""
Set-prediction detection loss and the dual-timestep consistency loss
"""

import logging
from dataclasses import dataclass
from typing import Dict

import torch
from torchvision.ops import sigmoid_focal_loss

from src.geometry.boxes import box_cxcywh_to_xyxy, elementwise_giou
from src.objective.matcher import FOCAL_ALPHA, FOCAL_GAMMA, LossWeights, MatchResult, match

logger = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    """Weighted total plus the unweighted cls / L1 / GIoU components"""

    total: torch.Tensor
    cls: torch.Tensor
    l1: torch.Tensor
    giou: torch.Tensor

    def __add__(self, other: 'LossBreakdown') -> 'LossBreakdown':
        return LossBreakdown(self.total + other.total, self.cls + other.cls,
                             self.l1 + other.l1, self.giou + other.giou)

    def scaled(self, factor: float) -> 'LossBreakdown':
        return LossBreakdown(self.total * factor, self.cls * factor,
                             self.l1 * factor, self.giou * factor)

    def as_dict(self) -> Dict[str, float]:
        return {
            'total': float(self.total.detach()),
            'cls': float(self.cls.detach()),
            'l1': float(self.l1.detach()),
            'giou': float(self.giou.detach()),
        }


def detection_loss(preds, gt_boxes: torch.Tensor, gt_labels: torch.Tensor,
                   matching: MatchResult, weights: LossWeights) -> LossBreakdown:
    """
    Loss of one image's predictions against its GT under a fixed match.
    Focal loss covers every prediction (unmatched rows target no object)
    and is normalized by the GT count; L1 and GIoU average over pairs.
    """
    logits, boxes = preds.x_cls, preds.x_box
    num_pairs = len(matching.pairs)

    targets = torch.zeros_like(logits)
    if num_pairs:
        pred_idx = torch.tensor(matching.pred_indices, dtype=torch.long, device=logits.device)
        gt_idx = torch.tensor(matching.gt_indices, dtype=torch.long, device=logits.device)
        targets[pred_idx, gt_labels.to(logits.device).long()[gt_idx]] = 1.0

    loss_cls = sigmoid_focal_loss(logits, targets, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA,
                                  reduction='sum') / max(num_pairs, 1)

    if num_pairs:
        src = boxes[pred_idx]
        tgt = gt_boxes.to(boxes)[gt_idx]
        loss_l1 = (src - tgt).abs().sum(-1).mean()
        loss_giou = (1 - elementwise_giou(box_cxcywh_to_xyxy(src), box_cxcywh_to_xyxy(tgt))).mean()
    else:
        # keep the graph connected so backward() works on GT-free images
        loss_l1 = boxes.sum() * 0.0
        loss_giou = boxes.sum() * 0.0

    total = (weights.lambda_cls * loss_cls
             + weights.lambda_l1 * loss_l1
             + weights.lambda_giou * loss_giou)
    return LossBreakdown(total=total, cls=loss_cls, l1=loss_l1, giou=loss_giou)


def matched_detection_loss(preds, gt_boxes: torch.Tensor, gt_labels: torch.Tensor,
                           weights: LossWeights) -> LossBreakdown:
    return detection_loss(preds, gt_boxes, gt_labels, match(preds, gt_boxes, gt_labels, weights), weights)


def consistency_loss(out_t, out_tm1, gt_boxes: torch.Tensor, gt_labels: torch.Tensor,
                     weights: LossWeights) -> LossBreakdown:
    """
    L(d_{t_r-1}, G) + L(d_{t_r}, G), each side matched on its own.
    Both outputs are single-image DetectionOutputs.
    """
    return (matched_detection_loss(out_tm1, gt_boxes, gt_labels, weights)
            + matched_detection_loss(out_t, gt_boxes, gt_labels, weights))
