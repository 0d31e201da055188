"""
Deterministic synthetic shapes: filled geometric shapes on a textured
background. Classes are shape kinds, not colors.
"""

import logging
from typing import List, Tuple

import numpy as np
from PIL import Image, ImageDraw

from src.data.records import DatasetRecord, DetectionDataset
from src.errors import DomainError

logger = logging.getLogger(__name__)

SHAPE_KINDS = ('rectangle', 'ellipse', 'triangle', 'diamond', 'cross')
MIN_SIDE = 8


def _background(rng: np.random.Generator, size: int) -> Image.Image:
    """Low-contrast blotchy texture so the extractor cannot key on flat color"""
    coarse = rng.integers(60, 190, size=(size // 8 + 1, size // 8 + 1, 3), dtype=np.uint8)
    texture = Image.fromarray(coarse).resize((size, size), Image.Resampling.BILINEAR)
    grain = rng.integers(-12, 13, size=(size, size, 3))
    pixels = np.clip(np.asarray(texture, dtype=np.int64) + grain, 0, 255).astype(np.uint8)
    return Image.fromarray(pixels)


def _draw_shape(draw: ImageDraw.ImageDraw, kind: str, x0: int, y0: int, w: int, h: int):
    x1, y1 = x0 + w - 1, y0 + h - 1
    xm, ym = x0 + (w - 1) / 2, y0 + (h - 1) / 2
    if kind == 'rectangle':
        draw.rectangle([x0, y0, x1, y1], fill=255)
    elif kind == 'ellipse':
        draw.ellipse([x0, y0, x1, y1], fill=255)
    elif kind == 'triangle':
        draw.polygon([(x0, y1), (x1, y1), (xm, y0)], fill=255)
    elif kind == 'diamond':
        draw.polygon([(xm, y0), (x1, ym), (xm, y1), (x0, ym)], fill=255)
    elif kind == 'cross':
        bar_w, bar_h = max(w // 3, 2), max(h // 3, 2)
        top = y0 + (h - bar_h) // 2
        left = x0 + (w - bar_w) // 2
        draw.rectangle([x0, top, x1, top + bar_h - 1], fill=255)
        draw.rectangle([left, y0, left + bar_w - 1, y1], fill=255)


def _render(rng: np.random.Generator, image_size: int, max_objects: int,
            num_classes: int) -> Tuple[np.ndarray, List[List[float]], List[int]]:
    canvas = _background(rng, image_size)
    count = int(rng.integers(1, max_objects + 1)) if max_objects > 0 else 0
    max_side = max(MIN_SIDE, image_size // 2)

    boxes, labels = [], []
    for _ in range(count):
        label = int(rng.integers(0, num_classes))
        w = int(rng.integers(MIN_SIDE, max_side + 1))
        h = int(rng.integers(MIN_SIDE, max_side + 1))
        x0 = int(rng.integers(0, image_size - w + 1))
        y0 = int(rng.integers(0, image_size - h + 1))
        color = tuple(int(c) for c in rng.integers(0, 256, size=3))

        mask = Image.new('L', (image_size, image_size), 0)
        _draw_shape(ImageDraw.Draw(mask), SHAPE_KINDS[label], x0, y0, w, h)
        bbox = mask.getbbox()
        if bbox is None:
            continue
        canvas.paste(color, mask=mask)

        bx0, by0, bx1, by1 = bbox
        boxes.append([(bx0 + bx1) / 2 / image_size, (by0 + by1) / 2 / image_size,
                      (bx1 - bx0) / image_size, (by1 - by0) / image_size])
        labels.append(label)

    return np.asarray(canvas), boxes, labels


def generate_synthetic(split_seed: int, count: int, image_size: int = 64,
                       max_objects: int = 5, num_classes: int = 3) -> DetectionDataset:
    """
    `count` images, each from its own child seed of split_seed, so a
    record only depends on (split_seed, index).
    """
    if count < 1:
        raise DomainError(f"count must be >= 1, got {count}")
    if not (1 <= num_classes <= len(SHAPE_KINDS)):
        raise DomainError(f"num_classes must be in [1, {len(SHAPE_KINDS)}], got {num_classes}")
    if image_size < 2 * MIN_SIDE:
        raise DomainError(f"image_size must be >= {2 * MIN_SIDE}, got {image_size}")

    children = np.random.SeedSequence(split_seed).spawn(count)
    records = []
    for index, child in enumerate(children):
        pixels, boxes, labels = _render(np.random.default_rng(child), image_size, max_objects, num_classes)
        records.append(DatasetRecord(
            image_id=index + 1,
            width=image_size,
            height=image_size,
            boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
            labels=np.asarray(labels, dtype=np.int64),
            image=pixels,
            file_name=f"{index + 1:06d}.png",
        ))

    logger.info(f"✅ Generated {count} synthetic images (seed {split_seed}, {num_classes} classes)")
    return DetectionDataset(records, categories=list(SHAPE_KINDS[:num_classes]))
