"""
Optimal one-to-one assignment of predictions to ground-truth boxes
"""

import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from src.errors import DomainError
from src.geometry.boxes import box_cxcywh_to_xyxy, generalized_box_iou

logger = logging.getLogger(__name__)

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass(frozen=True)
class LossWeights:
    """Positive weights of the classification, L1 and GIoU terms"""

    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0

    def __post_init__(self):
        for name in ('lambda_cls', 'lambda_l1', 'lambda_giou'):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be strictly positive, got {getattr(self, name)}")


@dataclass
class MatchResult:
    """(prediction index, GT index) pairs plus the predictions left unmatched"""

    pairs: List[Tuple[int, int]]
    unmatched: List[int] = field(default_factory=list)

    @property
    def pred_indices(self) -> List[int]:
        return [p for p, _ in self.pairs]

    @property
    def gt_indices(self) -> List[int]:
        return [g for _, g in self.pairs]


def solve_assignment(cost: np.ndarray) -> List[Tuple[int, int]]:
    """Minimum-cost assignment of every row of a rows <= cols matrix (or the transpose)"""
    rows, cols = linear_sum_assignment(np.asarray(cost, dtype=np.float64))
    return sorted(zip(rows.tolist(), cols.tolist()))


def focal_cost(logits: torch.Tensor, gt_labels: torch.Tensor,
               alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    """(n, C) logits x (k,) labels -> (n, k) focal classification cost"""
    prob = logits.sigmoid()
    neg_cost = (1 - alpha) * prob ** gamma * (-(1 - prob + 1e-8).log())
    pos_cost = alpha * (1 - prob) ** gamma * (-(prob + 1e-8).log())
    return pos_cost[:, gt_labels] - neg_cost[:, gt_labels]


def cost_matrix(logits: torch.Tensor, boxes: torch.Tensor, gt_boxes: torch.Tensor,
                gt_labels: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """Pair cost lambda_cls*focal + lambda_L1*L1 + lambda_giou*(1 - GIoU), shape (n, k)"""
    cost_class = focal_cost(logits, gt_labels)
    cost_bbox = torch.cdist(boxes, gt_boxes.to(boxes.dtype), p=1)
    cost_giou = 1 - generalized_box_iou(box_cxcywh_to_xyxy(boxes), box_cxcywh_to_xyxy(gt_boxes.to(boxes.dtype)))
    return (weights.lambda_cls * cost_class
            + weights.lambda_l1 * cost_bbox
            + weights.lambda_giou * cost_giou)


@torch.no_grad()
def match(preds, gt_boxes: torch.Tensor, gt_labels: torch.Tensor,
          weights: LossWeights) -> MatchResult:
    """
    Hungarian matching of one image's predictions (single-image
    DetectionOutput) to its GT. Each GT gets exactly one prediction.
    """
    n = preds.x_box.shape[0]
    k = gt_boxes.shape[0]
    if k > n:
        raise DomainError(f"{k} GT boxes cannot be matched to {n} predictions")
    if k == 0:
        return MatchResult(pairs=[], unmatched=list(range(n)))

    cost = cost_matrix(preds.x_cls.detach(), preds.x_box.detach(), gt_boxes, gt_labels.long(), weights)
    cost = torch.nan_to_num(cost, nan=1e8, posinf=1e8, neginf=-1e8)
    pairs = solve_assignment(cost.cpu().numpy())
    matched = {p for p, _ in pairs}
    return MatchResult(pairs=pairs, unmatched=[i for i in range(n) if i not in matched])
