"""
The consistency function f_theta(x, sigma) = c_skip(sigma) x + c_out(sigma) F_theta(x, sigma)
wrapped around the toy backbone and the iterative detection head.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Protocol, Tuple, Union

import torch
from torch import nn

from src.corruption.proposals import ProposalSet, scale_for_decoder
from src.decoder.features import ImageFeatures, ImageInput, ToyBackbone
from src.decoder.head import DetectionHead
from src.errors import DomainError, ShapeError
from src.geometry.boxes import from_signal_space
from src.schedule.noise_schedule import NoiseSchedule

logger = logging.getLogger(__name__)

# float32 storage of sigma_max may land a hair above the python value
SIGMA_MAX_SLACK = 1e-6


@dataclass
class DetectionOutput:
    """
    Decoder predictions, row-aligned: class logits, boxes in normalized
    cxcywh, the clean signal-space estimate x_0 and the echoed input x_b.
    Batched outputs carry a leading image dimension; `image(i)` drops it.
    """

    x_cls: torch.Tensor
    x_box: torch.Tensor
    x_0: torch.Tensor
    x_b: torch.Tensor

    def image(self, index: int) -> 'DetectionOutput':
        return DetectionOutput(self.x_cls[index], self.x_box[index], self.x_0[index], self.x_b[index])

    @property
    def scores(self) -> torch.Tensor:
        return torch.sigmoid(self.x_cls)


class Denoiser(Protocol):
    """What the sampler needs from a model"""

    schedule: NoiseSchedule

    def extract_features(self, images: ImageInput) -> ImageFeatures: ...

    def f_theta(self, features: ImageFeatures, x_t, sigma=None) -> DetectionOutput: ...


class ConsistencyDetector(nn.Module):
    """Feature extractor + F_theta + the skip/out parameterization"""

    def __init__(self, num_classes: int, schedule: NoiseSchedule, feat_channels: int = 64,
                 num_stages: int = 2, num_attn_heads: int = 4, dim_feedforward: int = 256,
                 pooler_resolution: int = 7, dynamic_dim: int = 16):
        super().__init__()
        self.num_classes = num_classes
        self.schedule = schedule
        self.backbone = ToyBackbone(feat_channels)
        self.head = DetectionHead(
            num_classes=num_classes,
            feat_channels=feat_channels,
            num_stages=num_stages,
            num_attn_heads=num_attn_heads,
            dim_feedforward=dim_feedforward,
            pooler_resolution=pooler_resolution,
            dynamic_dim=dynamic_dim,
            sigma_data=schedule.sigma_data,
        )

    def extract_features(self, images: ImageInput) -> ImageFeatures:
        return self.backbone(images)

    def F_theta(self, features: ImageFeatures, scaled_boxes: torch.Tensor,
                sigma: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Raw box output and class logits for c_in-scaled boxes"""
        return self.head(features, scaled_boxes, sigma)

    def f_theta(self, features: ImageFeatures, x_t: Union[ProposalSet, torch.Tensor],
                sigma: Optional[Union[float, torch.Tensor]] = None,
                schedule: Optional[NoiseSchedule] = None) -> DetectionOutput:
        """
        Denoise signal-space boxes x_t at noise level sigma.
        A ProposalSet is a single image (its own sigma); a tensor is (B, n, 4)
        with sigma a float or a (B,) tensor.
        """
        schedule = schedule or self.schedule
        if isinstance(x_t, ProposalSet):
            boxes, sigma = x_t.boxes[None], x_t.sigma
        else:
            boxes = x_t
        if boxes.dim() != 3 or boxes.shape[-1] != 4:
            raise ShapeError(f"x_t must be (B, n, 4), got {tuple(boxes.shape)}")
        if boxes.shape[0] != features.batch_size:
            raise ShapeError(f"{boxes.shape[0]} box sets for {features.batch_size} images")

        sigma = torch.as_tensor(sigma, dtype=boxes.dtype, device=boxes.device)
        sigma = sigma.expand(boxes.shape[0]) if sigma.dim() == 0 else sigma
        _check_sigma(sigma, schedule)

        scaled = scale_for_decoder(boxes, schedule, sigma)
        raw, logits = self.F_theta(features, scaled, sigma)

        c_skip, c_out = schedule.c_skip_out(sigma)
        x_0 = c_skip[:, None, None] * boxes + c_out[:, None, None] * raw
        out = DetectionOutput(x_cls=logits, x_box=from_signal_space(x_0), x_0=x_0, x_b=boxes)
        if isinstance(x_t, ProposalSet):
            return out.image(0)
        return out


def _check_sigma(sigma: torch.Tensor, schedule: NoiseSchedule):
    low = torch.tensor(schedule.sigma_min, dtype=sigma.dtype).double()
    high = schedule.sigma_max * (1 + SIGMA_MAX_SLACK)
    s = sigma.detach().double().cpu()
    if bool((s < low).any()) or bool((s > high).any()):
        raise DomainError(
            f"sigma {s.tolist()} outside [{schedule.sigma_min}, {schedule.sigma_max}]")


def build_detector(model_settings, schedule: NoiseSchedule, num_classes: int) -> ConsistencyDetector:
    return ConsistencyDetector(
        num_classes=num_classes,
        schedule=schedule,
        feat_channels=model_settings.feat_channels,
        num_stages=model_settings.num_stages,
        num_attn_heads=model_settings.num_attn_heads,
        dim_feedforward=model_settings.dim_feedforward,
        pooler_resolution=model_settings.pooler_resolution,
        dynamic_dim=model_settings.dynamic_dim,
    )
