"""
Draw detections on images for eyeballing inference output
"""

import logging
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
from PIL import Image, ImageDraw

from src.geometry.boxes import Detection

logger = logging.getLogger(__name__)

PALETTE = [(230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48), (145, 30, 180)]


def draw_detections(image: np.ndarray, detections: List[Detection], categories: Sequence[str]) -> Image.Image:
    canvas = Image.fromarray(image).convert('RGB')
    draw = ImageDraw.Draw(canvas)
    width, height = canvas.size
    for det in detections:
        x1, y1, x2, y2 = det.box.to_xyxy()
        color = PALETTE[det.category % len(PALETTE)]
        draw.rectangle([x1 * width, y1 * height, x2 * width, y2 * height], outline=color, width=1)
        name = categories[det.category] if det.category < len(categories) else str(det.category)
        draw.text((x1 * width + 1, y1 * height + 1), f"{name} {det.score:.2f}", fill=color)
    return canvas


def write_overlay(image: np.ndarray, detections: List[Detection], categories: Sequence[str],
                  path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    draw_detections(image, detections, categories).save(path)
    return path
