"""
Fixed-cardinality proposal sets: GT padding, forward noising, decoder
input scaling, box renewal and proposal supplementation.

All randomness comes from an explicit torch.Generator owned by the caller.
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple, Union

import torch

from src.errors import DomainError, ShapeError
from src.geometry.boxes import to_signal_space
from src.schedule.noise_schedule import NoiseSchedule

logger = logging.getLogger(__name__)

PADDING_MODES = ('gaussian', 'jitter')
JITTER_SCALE = 0.25


@dataclass
class ProposalSet:
    """n boxes in signal space carrying noise level sigma"""

    boxes: torch.Tensor
    sigma: float
    num_gt: int = 0
    gt_index: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.boxes.dim() != 2 or self.boxes.shape[-1] != 4:
            raise ShapeError(f"proposal boxes must be (n, 4), got {tuple(self.boxes.shape)}")

    @property
    def count(self) -> int:
        return int(self.boxes.shape[0])


def make_generator(seed: int, device: Union[str, torch.device] = 'cpu') -> torch.Generator:
    generator = torch.Generator(device=device)
    generator.manual_seed(int(seed))
    return generator


def gaussian_rows(shape, generator: torch.Generator, like: torch.Tensor = None) -> torch.Tensor:
    dtype = like.dtype if like is not None else torch.float32
    return torch.randn(shape, generator=generator, dtype=dtype, device=generator.device)


def pad_ground_truth(gt_boxes: torch.Tensor, n_tr: int, generator: torch.Generator,
                     mode: str = 'gaussian', sigma_min: float = 0.002) -> ProposalSet:
    """
    Pad normalized cxcywh GT boxes to exactly n_tr signal-space rows.
    GT rows come first; surplus GT is subsampled uniformly at random and
    `gt_index` records which source rows were kept, in row order.
    """
    if n_tr < 1:
        raise DomainError(f"n_tr must be >= 1, got {n_tr}")
    if mode not in PADDING_MODES:
        raise DomainError(f"unknown padding mode '{mode}'")

    gt = to_signal_space(gt_boxes.reshape(-1, 4).float())
    picked = torch.arange(gt.shape[0], device=gt.device)
    if gt.shape[0] > n_tr:
        picked = torch.randperm(gt.shape[0], generator=generator, device=generator.device)[:n_tr].to(gt.device)
        gt = gt[picked]
    num_aux = n_tr - gt.shape[0]

    aux = gaussian_rows((num_aux, 4), generator, gt).to(gt.device)
    if mode == 'jitter' and gt.shape[0] > 0 and num_aux > 0:
        source = torch.randint(0, gt.shape[0], (num_aux,), generator=generator,
                               device=generator.device).to(gt.device)
        aux = gt[source] + aux * JITTER_SCALE

    return ProposalSet(torch.cat([gt, aux], dim=0), sigma=sigma_min, num_gt=gt.shape[0],
                       gt_index=picked)


def add_noise(x_s: torch.Tensor, sigma_t: Union[float, torch.Tensor],
              epsilon: torch.Tensor) -> torch.Tensor:
    """x_t = x_s + epsilon * sigma_t, broadcasting sigma over trailing dims"""
    if epsilon.shape != x_s.shape:
        raise ShapeError(f"noise shape {tuple(epsilon.shape)} != boxes {tuple(x_s.shape)}")
    if isinstance(sigma_t, torch.Tensor) and sigma_t.dim() > 0:
        sigma_t = sigma_t.reshape(-1, *([1] * (x_s.dim() - 1)))
    return x_s + epsilon * sigma_t


def corrupt(x_s: ProposalSet, sigma_t: float, epsilon: torch.Tensor) -> ProposalSet:
    """Forward noising; no clamping"""
    return replace(x_s, boxes=add_noise(x_s.boxes, sigma_t, epsilon), sigma=float(sigma_t))


def scale_for_decoder(x_t: Union[ProposalSet, torch.Tensor], schedule: NoiseSchedule,
                      sigma: Optional[Union[float, torch.Tensor]] = None) -> torch.Tensor:
    """(c_in(sigma_t) / 2) * x_t, the decoder-input representation"""
    if isinstance(x_t, ProposalSet):
        boxes, sigma = x_t.boxes, x_t.sigma
    else:
        boxes = x_t
    scale = schedule.c_in(sigma) / 2.0
    if isinstance(scale, torch.Tensor) and scale.dim() > 0:
        scale = scale.reshape(-1, *([1] * (boxes.dim() - 1)))
    return boxes * scale


def renewal_mask(class_logits: torch.Tensor, threshold: float) -> torch.Tensor:
    """Rows whose max sigmoid class score is >= threshold"""
    if not (0.0 <= threshold <= 1.0):
        raise DomainError(f"box renewal threshold must be in [0, 1], got {threshold}")
    if class_logits.shape[-1] == 0 or class_logits.shape[0] == 0:
        return torch.ones(class_logits.shape[0], dtype=torch.bool, device=class_logits.device)
    scores = torch.sigmoid(class_logits).max(dim=-1).values
    return scores >= threshold


def box_renewal(pred, x_b: ProposalSet, x_0: ProposalSet,
                threshold: float) -> Tuple[ProposalSet, ProposalSet, int]:
    """
    Keep the rows whose max class score reaches the threshold.
    `pred` is a single-image DetectionOutput or a raw (n, C) logit tensor.
    """
    logits = pred if isinstance(pred, torch.Tensor) else pred.x_cls
    if logits.shape[0] != x_b.count or x_0.count != x_b.count:
        raise ShapeError("renewal scores must align row-wise with x_b and x_0")
    keep = renewal_mask(logits, threshold)
    n_r = int(keep.sum())
    return (replace(x_b, boxes=x_b.boxes[keep], num_gt=0, gt_index=None),
            replace(x_0, boxes=x_0.boxes[keep], num_gt=0, gt_index=None),
            n_r)


def supplement_proposals(x: ProposalSet, n_p: int, sigma_next: float,
                         generator: torch.Generator) -> ProposalSet:
    """Append n_p - count fresh Gaussian * sigma_next rows"""
    if x.count > n_p:
        raise DomainError(f"cannot supplement {x.count} proposals down to {n_p}")
    fresh = gaussian_rows((n_p - x.count, 4), generator, x.boxes).to(x.boxes.device) * sigma_next
    return replace(x, boxes=torch.cat([x.boxes, fresh], dim=0), sigma=float(sigma_next))
