"""
Toy convolutional image encoder E(X).

Three strided blocks (total stride 8) stand in for a pretrained
ResNet+FPN so the decoder trains on a CPU. Inputs are padded on the
bottom/right to a multiple of the stride.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from src.errors import DomainError

logger = logging.getLogger(__name__)

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25

ImageInput = Union[np.ndarray, torch.Tensor, Sequence[np.ndarray]]


@dataclass
class ImageFeatures:
    """Feature grid plus the geometry needed to pool RoIs from it"""

    maps: torch.Tensor  # (B, C, h, w)
    stride: int
    image_sizes: List[Tuple[int, int]]  # (H, W) before padding

    @property
    def batch_size(self) -> int:
        return int(self.maps.shape[0])

    def whwh(self) -> torch.Tensor:
        """(B, 4) pixel scale turning normalized xyxy into image pixels"""
        sizes = [[w, h, w, h] for h, w in self.image_sizes]
        return torch.tensor(sizes, dtype=self.maps.dtype, device=self.maps.device)

    def select(self, index: int) -> 'ImageFeatures':
        return ImageFeatures(self.maps[index:index + 1], self.stride, [self.image_sizes[index]])


def image_to_tensor(image: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    """H x W x 3 uint8 array (or 3 x H x W float tensor) -> normalized 3 x H x W float"""
    if isinstance(image, torch.Tensor):
        return image.float()
    array = np.asarray(image)
    if array.ndim != 3 or array.shape[-1] != 3:
        raise DomainError(f"expected an H x W x 3 image, got shape {array.shape}")
    tensor = torch.from_numpy(np.ascontiguousarray(array)).permute(2, 0, 1).float() / 255.0
    return (tensor - PIXEL_MEAN) / PIXEL_STD


def pad_to_stride(images: List[torch.Tensor], stride: int) -> torch.Tensor:
    """Zero-pad a list of 3 x H x W tensors bottom/right to a shared stride multiple"""
    max_h = max(img.shape[-2] for img in images)
    max_w = max(img.shape[-1] for img in images)
    pad_h = -(-max_h // stride) * stride
    pad_w = -(-max_w // stride) * stride
    batch = images[0].new_zeros((len(images), 3, pad_h, pad_w))
    for i, img in enumerate(images):
        batch[i, :, :img.shape[-2], :img.shape[-1]] = img
    return batch


def _block(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1, bias=False),
        nn.GroupNorm(8, out_channels),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
        nn.GroupNorm(8, out_channels),
        nn.ReLU(inplace=True),
    )


class ToyBackbone(nn.Module):
    """Stride-8 convolutional feature extractor"""

    stride = 8

    def __init__(self, out_channels: int = 64):
        super().__init__()
        mid = max(out_channels // 2, 8)
        self.out_channels = out_channels
        self.body = nn.Sequential(
            _block(3, mid),
            _block(mid, out_channels),
            _block(out_channels, out_channels),
        )

    def forward(self, images: ImageInput) -> ImageFeatures:
        if isinstance(images, torch.Tensor) and images.dim() == 4:
            tensors = list(images)
        elif isinstance(images, (list, tuple)):
            tensors = [image_to_tensor(img) for img in images]
        else:
            tensors = [image_to_tensor(images)]

        if not tensors or any(t.numel() == 0 for t in tensors):
            raise DomainError("cannot extract features from an empty image")

        sizes = [(int(t.shape[-2]), int(t.shape[-1])) for t in tensors]
        param = next(self.parameters())
        batch = pad_to_stride([t.to(param.device, param.dtype) for t in tensors], self.stride)
        maps = self.body(batch)
        return ImageFeatures(maps=maps, stride=self.stride, image_sizes=sizes)

