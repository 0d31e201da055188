"""
Iterative detection head F_theta.

Each stage pools 7x7 RoI features for the current boxes, lets the
proposals attend to each other, mixes in the pooled features through a
dynamic (per-proposal) convolution, modulates by the noise-level
embedding and regresses class logits plus box deltas. Boxes are refined
stage to stage; the last stage's boxes become the raw network output.
"""

import logging
import math
from typing import Optional, Tuple

import torch
from torch import nn
from torchvision.ops import roi_align

from src.decoder.features import ImageFeatures
from src.geometry.boxes import box_cxcywh_to_xyxy, box_xyxy_to_cxcywh, from_signal_space

logger = logging.getLogger(__name__)

SCALE_CLAMP = math.log(1000.0 / 16)
BBOX_WEIGHTS = (2.0, 2.0, 1.0, 1.0)
# degenerate RoIs could never grow through multiplicative deltas
MIN_BOX_SIZE = 0.01


class SigmaEmbedding(nn.Module):
    """Sinusoidal features of log(sigma) followed by an MLP"""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4),
            nn.GELU(),
            nn.Linear(dim * 4, dim * 4),
        )

    def forward(self, sigma: torch.Tensor) -> torch.Tensor:
        half_dim = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half_dim, device=sigma.device, dtype=sigma.dtype) / half_dim)
        args = sigma.log()[:, None] * freqs[None, :]
        embedding = torch.cat([args.sin(), args.cos()], dim=-1)
        return self.mlp(embedding)


class DynamicConv(nn.Module):
    """Per-proposal 1x1 convolutions whose weights come from the proposal feature"""

    def __init__(self, feat_channels: int, dynamic_dim: int, pooler_resolution: int):
        super().__init__()
        self.feat_channels = feat_channels
        self.dynamic_dim = dynamic_dim
        self.num_params = feat_channels * dynamic_dim
        self.dynamic_layer = nn.Linear(feat_channels, 2 * self.num_params)

        self.norm1 = nn.LayerNorm(dynamic_dim)
        self.norm2 = nn.LayerNorm(feat_channels)
        self.activation = nn.ReLU(inplace=True)

        self.out_layer = nn.Linear(feat_channels * pooler_resolution ** 2, feat_channels)
        self.norm3 = nn.LayerNorm(feat_channels)

    def forward(self, pro_features: torch.Tensor, roi_features: torch.Tensor) -> torch.Tensor:
        """
        pro_features: (M, C) one vector per proposal
        roi_features: (M, S*S, C) pooled grid per proposal
        """
        parameters = self.dynamic_layer(pro_features)
        param1 = parameters[:, :self.num_params].view(-1, self.feat_channels, self.dynamic_dim)
        param2 = parameters[:, self.num_params:].view(-1, self.dynamic_dim, self.feat_channels)

        features = torch.bmm(roi_features, param1)
        features = self.activation(self.norm1(features))
        features = torch.bmm(features, param2)
        features = self.activation(self.norm2(features))

        features = self.out_layer(features.flatten(1))
        return self.activation(self.norm3(features))


class ProposalStage(nn.Module):
    """One basic module: RoI pooling -> self-attention -> dynamic conv -> heads"""

    def __init__(self, num_classes: int, feat_channels: int, num_attn_heads: int,
                 dim_feedforward: int, pooler_resolution: int, dynamic_dim: int):
        super().__init__()
        self.feat_channels = feat_channels
        self.pooler_resolution = pooler_resolution

        self.self_attn = nn.MultiheadAttention(feat_channels, num_attn_heads, batch_first=True)
        self.inst_interact = DynamicConv(feat_channels, dynamic_dim, pooler_resolution)

        self.linear1 = nn.Linear(feat_channels, dim_feedforward)
        self.linear2 = nn.Linear(dim_feedforward, feat_channels)
        self.norm1 = nn.LayerNorm(feat_channels)
        self.norm2 = nn.LayerNorm(feat_channels)
        self.norm3 = nn.LayerNorm(feat_channels)
        self.activation = nn.ReLU(inplace=True)

        self.block_time_mlp = nn.Sequential(nn.SiLU(), nn.Linear(feat_channels * 4, feat_channels * 2))

        self.cls_module = nn.Sequential(
            nn.Linear(feat_channels, feat_channels, bias=False),
            nn.LayerNorm(feat_channels),
            nn.ReLU(inplace=True),
        )
        self.reg_module = nn.Sequential(*[
            layer
            for _ in range(3)
            for layer in (nn.Linear(feat_channels, feat_channels, bias=False),
                          nn.LayerNorm(feat_channels),
                          nn.ReLU(inplace=True))
        ])
        self.class_logits = nn.Linear(feat_channels, num_classes)
        self.bboxes_delta = nn.Linear(feat_channels, 4)

    def pool(self, features: ImageFeatures, boxes_px: torch.Tensor) -> torch.Tensor:
        """(B, n, 4) pixel xyxy -> (B*n, S*S, C)"""
        rois = [b for b in boxes_px]
        pooled = roi_align(features.maps, rois, output_size=self.pooler_resolution,
                           spatial_scale=1.0 / features.stride, sampling_ratio=2, aligned=True)
        return pooled.flatten(2).permute(0, 2, 1)

    def forward(self, features: ImageFeatures, boxes_px: torch.Tensor,
                pro_features: Optional[torch.Tensor], time_emb: torch.Tensor):
        batch, num_boxes = boxes_px.shape[:2]
        roi_features = self.pool(features, boxes_px)

        if pro_features is None:
            pro_features = roi_features.mean(1).view(batch, num_boxes, self.feat_channels)

        attended = self.self_attn(pro_features, pro_features, pro_features, need_weights=False)[0]
        pro_features = self.norm1(pro_features + attended)

        flat = pro_features.reshape(batch * num_boxes, self.feat_channels)
        obj_features = self.norm2(flat + self.inst_interact(flat, roi_features))
        obj_features = self.norm3(obj_features + self.linear2(self.activation(self.linear1(obj_features))))

        scale_shift = self.block_time_mlp(time_emb).repeat_interleave(num_boxes, dim=0)
        scale, shift = scale_shift.chunk(2, dim=1)
        fc_feature = obj_features * (scale + 1) + shift

        logits = self.class_logits(self.cls_module(fc_feature))
        deltas = self.bboxes_delta(self.reg_module(fc_feature))
        pred_boxes = apply_deltas(deltas, boxes_px.reshape(-1, 4))

        return (logits.view(batch, num_boxes, -1),
                pred_boxes.view(batch, num_boxes, 4),
                obj_features.view(batch, num_boxes, -1))


def apply_deltas(deltas: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    """Apply (dx, dy, dw, dh) deltas to xyxy boxes"""
    widths = boxes[:, 2] - boxes[:, 0]
    heights = boxes[:, 3] - boxes[:, 1]
    ctr_x = boxes[:, 0] + 0.5 * widths
    ctr_y = boxes[:, 1] + 0.5 * heights

    wx, wy, ww, wh = BBOX_WEIGHTS
    dx = deltas[:, 0] / wx
    dy = deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=SCALE_CLAMP)
    dh = (deltas[:, 3] / wh).clamp(max=SCALE_CLAMP)

    pred_ctr_x = dx * widths + ctr_x
    pred_ctr_y = dy * heights + ctr_y
    pred_w = torch.exp(dw) * widths
    pred_h = torch.exp(dh) * heights
    return torch.stack([pred_ctr_x - 0.5 * pred_w, pred_ctr_y - 0.5 * pred_h,
                        pred_ctr_x + 0.5 * pred_w, pred_ctr_y + 0.5 * pred_h], dim=-1)


class DetectionHead(nn.Module):
    """
    F_theta: k cascaded proposal stages.

    Input boxes arrive c_in-scaled in signal space; they are clamped into
    image coordinates only to choose RoI locations. The returned box
    output is the last stage's box in signal space divided by sigma_data,
    so that at high noise (c_out -> sigma_data) x_0 follows the head's box.
    """

    def __init__(self, num_classes: int, feat_channels: int = 64, num_stages: int = 2,
                 num_attn_heads: int = 4, dim_feedforward: int = 256,
                 pooler_resolution: int = 7, dynamic_dim: int = 16, sigma_data: float = 0.5):
        super().__init__()
        self.num_classes = num_classes
        self.sigma_data = sigma_data
        self.sigma_embedding = SigmaEmbedding(feat_channels)
        self.stages = nn.ModuleList([
            ProposalStage(num_classes, feat_channels, num_attn_heads, dim_feedforward,
                          pooler_resolution, dynamic_dim)
            for _ in range(num_stages)
        ])
        self._reset_parameters()

    def _reset_parameters(self):
        for p in self.parameters():
            if p.dim() > 1:
                nn.init.xavier_uniform_(p)
        # focal-loss prior: start every class near probability 0.01
        bias_value = -math.log((1 - 0.01) / 0.01)
        for stage in self.stages:
            nn.init.constant_(stage.class_logits.bias, bias_value)

    def forward(self, features: ImageFeatures, scaled_boxes: torch.Tensor,
                sigma: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        batch, num_boxes = scaled_boxes.shape[:2]
        if num_boxes == 0:
            empty = scaled_boxes.new_zeros((batch, 0, 4))
            return empty, scaled_boxes.new_zeros((batch, 0, self.num_classes))

        time_emb = self.sigma_embedding(sigma.to(scaled_boxes.dtype))
        whwh = features.whwh().to(scaled_boxes.dtype)[:, None, :]
        boxes = from_signal_space(scaled_boxes)
        boxes = torch.cat([boxes[..., :2], boxes[..., 2:].clamp(min=MIN_BOX_SIZE)], dim=-1)
        boxes_px = box_cxcywh_to_xyxy(boxes) * whwh

        pro_features = None
        logits = None
        for stage in self.stages:
            logits, boxes_px, pro_features = stage(features, boxes_px, pro_features, time_emb)

        signal = box_xyxy_to_cxcywh(boxes_px / whwh) * 2.0 - 1.0
        return signal / self.sigma_data, logits
