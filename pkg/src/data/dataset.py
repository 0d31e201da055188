"""
torch Dataset / DataLoader plumbing for training.

Augmentation is a horizontal flip whose coin comes from a per-sample
generator seeded by (seed, epoch, index), so prefetching workers and
shuffling never change what a given sample looks like.
"""

import logging
from dataclasses import dataclass
from typing import List

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from src.data.records import DetectionDataset

logger = logging.getLogger(__name__)


@dataclass
class TrainingBatch:
    """Images (H x W x 3 uint8) with per-image normalized cxcywh GT"""

    images: List[np.ndarray]
    boxes: List[torch.Tensor]
    labels: List[torch.Tensor]
    image_ids: List[int]

    def __len__(self) -> int:
        return len(self.images)


def hflip(image: np.ndarray, boxes: np.ndarray):
    flipped = boxes.copy()
    flipped[:, 0] = 1.0 - flipped[:, 0]
    return np.ascontiguousarray(image[:, ::-1]), flipped


class DetectionTorchDataset(Dataset):
    """Index -> (image, boxes, labels, image_id) with optional flip"""

    def __init__(self, dataset: DetectionDataset, hflip_prob: float = 0.5, seed: int = 0):
        self.dataset = dataset
        self.hflip_prob = hflip_prob
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.dataset)

    def __getitem__(self, index: int):
        record = self.dataset[index]
        image = record.load_image()
        boxes = record.boxes
        coin = np.random.default_rng([self.seed, self.epoch, index]).random()
        if coin < self.hflip_prob:
            image, boxes = hflip(image, boxes)
        return (image,
                torch.as_tensor(boxes, dtype=torch.float32),
                torch.as_tensor(record.labels, dtype=torch.long),
                record.image_id)


def collate(samples) -> TrainingBatch:
    images, boxes, labels, image_ids = zip(*samples)
    return TrainingBatch(list(images), list(boxes), list(labels), list(image_ids))


def make_loader(dataset: DetectionTorchDataset, batch_size: int, seed: int,
                num_workers: int = 0) -> DataLoader:
    generator = torch.Generator()
    generator.manual_seed(seed)
    return DataLoader(dataset, batch_size=batch_size, shuffle=True, drop_last=False,
                      num_workers=num_workers, collate_fn=collate, generator=generator)


def batch_from_dataset(dataset: DetectionDataset, indices: List[int]) -> TrainingBatch:
    """Un-augmented batch of the given record indices"""
    return collate([
        (dataset[i].load_image(),
         torch.as_tensor(dataset[i].boxes, dtype=torch.float32),
         torch.as_tensor(dataset[i].labels, dtype=torch.long),
         dataset[i].image_id)
        for i in indices
    ])
