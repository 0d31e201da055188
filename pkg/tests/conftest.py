import numpy as np
import pytest
import torch

from src.config.settings import build_settings
from src.data.records import DatasetRecord, DetectionDataset
from src.data.synthetic import generate_synthetic
from src.decoder.consistency import DetectionOutput, build_detector
from src.decoder.features import ImageFeatures
from src.geometry.boxes import from_signal_space, to_signal_space
from src.schedule.noise_schedule import NoiseSchedule

TINY_CONFIG = {
    'seed': 0,
    'model': {
        'feat_channels': 16,
        'num_stages': 2,
        'num_attn_heads': 2,
        'dim_feedforward': 32,
        'pooler_resolution': 3,
        'dynamic_dim': 4,
    },
    'trainer': {
        'iterations': 2,
        'batch_size': 2,
        'n_tr': 8,
        'checkpoint_every': 1,
        'log_every': 1,
    },
    'data': {
        'num_classes': 3,
        'image_size': 32,
        'max_objects': 3,
        'train_count': 4,
        'val_count': 2,
    },
    'sampler': {
        'n_ss': 2,
        'n_p': 12,
    },
}


def tiny_raw(**sections):
    """TINY_CONFIG with some sections partially replaced"""
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in TINY_CONFIG.items()}
    for name, values in sections.items():
        if isinstance(values, dict):
            raw.setdefault(name, {}).update(values)
        else:
            raw[name] = values
    return raw


@pytest.fixture
def tiny_settings():
    return build_settings(tiny_raw())


@pytest.fixture
def schedule():
    return NoiseSchedule()


@pytest.fixture
def tiny_model(tiny_settings):
    torch.manual_seed(0)
    model = build_detector(tiny_settings.model, tiny_settings.schedule.to_schedule(), num_classes=3)
    return model.eval()


@pytest.fixture
def tiny_dataset():
    return generate_synthetic(split_seed=7, count=4, image_size=32, max_objects=3, num_classes=3)


@pytest.fixture
def blank_image():
    return np.full((32, 32, 3), 127, dtype=np.uint8)


class OracleDenoiser:
    """Answers every decode with the ground truth at near-certain scores"""

    def __init__(self, gt_boxes, gt_labels, num_classes: int, schedule: NoiseSchedule = None,
                 confidence: float = 20.0):
        self.schedule = schedule or NoiseSchedule()
        self.gt = to_signal_space(torch.as_tensor(gt_boxes, dtype=torch.float64).reshape(-1, 4))
        self.labels = torch.as_tensor(gt_labels, dtype=torch.long)
        self.num_classes = num_classes
        self.confidence = confidence
        self.calls = 0

    def extract_features(self, images):
        return ImageFeatures(maps=torch.zeros(1, 1, 1, 1), stride=8, image_sizes=[(32, 32)])

    def f_theta(self, features, x_t, sigma=None):
        self.calls += 1
        n = x_t.count
        rows = torch.arange(n) % len(self.gt)
        x_0 = self.gt[rows]
        logits = torch.full((n, self.num_classes), -20.0, dtype=torch.float64)
        logits[torch.arange(n), self.labels[rows]] = self.confidence
        return DetectionOutput(x_cls=logits, x_box=from_signal_space(x_0), x_0=x_0,
                               x_b=x_t.boxes.double())


@pytest.fixture
def oracle_scene():
    """Two well separated objects of different classes plus a third of class 0"""
    boxes = np.array([[0.25, 0.25, 0.2, 0.2],
                      [0.75, 0.70, 0.3, 0.2],
                      [0.70, 0.20, 0.15, 0.25]])
    labels = np.array([0, 1, 0])
    record = DatasetRecord(image_id=11, width=32, height=32, boxes=boxes, labels=labels,
                           image=np.zeros((32, 32, 3), dtype=np.uint8))
    dataset = DetectionDataset([record], categories=['rectangle', 'ellipse', 'triangle'])
    return dataset, OracleDenoiser(boxes, labels, num_classes=3)


@pytest.fixture
def tiny_config():
    """Factory for raw tiny configs; keyword sections are merged in"""
    return tiny_raw
