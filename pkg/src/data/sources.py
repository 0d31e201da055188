"""
Train / val splits as configured in the data section
"""

import logging

from src.data.coco import load_coco
from src.data.records import DetectionDataset
from src.data.synthetic import generate_synthetic
from src.errors import DatasetError

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val')


def load_split(data_settings, split: str) -> DetectionDataset:
    if split not in SPLITS:
        raise DatasetError(f"unknown split '{split}', expected one of {SPLITS}")
    if data_settings.source == 'synthetic':
        return generate_synthetic(
            split_seed=data_settings.train_seed if split == 'train' else data_settings.val_seed,
            count=data_settings.train_count if split == 'train' else data_settings.val_count,
            image_size=data_settings.image_size,
            max_objects=data_settings.max_objects,
            num_classes=data_settings.num_classes,
        )
    annotations = data_settings.annotations
    if split == 'val' and data_settings.val_annotations:
        annotations = data_settings.val_annotations
    return load_coco(annotations, data_settings.image_root)
