"""
COCO-format annotation ingestion and writing
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
from PIL import Image

from src.data.records import DatasetRecord, DetectionDataset
from src.errors import DatasetError
from src.geometry.boxes import Box, box_to_coco_bbox

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _read_json(path: Path) -> Any:
    if not path.exists():
        raise DatasetError(f"annotation file not found: {path}")
    try:
        with open(path, 'r') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed JSON in {path} at offset {e.pos}: {e.msg}") from e


def _require(mapping: Dict, key: str, where: str):
    if key not in mapping:
        raise DatasetError(f"{where} is missing '{key}'")
    return mapping[key]


def load_coco(annotation_path: PathLike, image_root: Optional[PathLike] = None) -> DetectionDataset:
    """
    Read a COCO detection file into normalized cxcywh records.
    Category ids are remapped densely in ascending id order; crowd and
    zero-area annotations are skipped and counted.
    """
    annotation_path = Path(annotation_path)
    data = _read_json(annotation_path)
    if not isinstance(data, dict):
        raise DatasetError(f"{annotation_path} must hold a JSON object")
    image_root = Path(image_root) if image_root else annotation_path.parent

    categories = sorted(_require(data, 'categories', 'annotation file'), key=lambda c: c['id'])
    category_ids = [int(c['id']) for c in categories]
    dense = {cid: i for i, cid in enumerate(category_ids)}

    images: Dict[int, Dict] = {}
    for entry in _require(data, 'images', 'annotation file'):
        image_id = int(_require(entry, 'id', 'image entry'))
        images[image_id] = {
            'width': int(_require(entry, 'width', f"image {image_id}")),
            'height': int(_require(entry, 'height', f"image {image_id}")),
            'file_name': entry.get('file_name'),
            'boxes': [],
            'labels': [],
        }

    skipped_empty = 0
    skipped_crowd = 0
    for ann in data.get('annotations', []):
        image_id = int(_require(ann, 'image_id', 'annotation'))
        if image_id not in images:
            raise DatasetError(f"annotation {ann.get('id')} references unknown image id {image_id}")
        category = int(_require(ann, 'category_id', 'annotation'))
        if category not in dense:
            raise DatasetError(f"annotation {ann.get('id')} references unknown category id {category}")
        if ann.get('iscrowd', 0):
            skipped_crowd += 1
            continue

        image = images[image_id]
        width, height = image['width'], image['height']
        x, y, w, h = (float(v) for v in _require(ann, 'bbox', 'annotation'))
        x1, y1 = min(max(x, 0.0), width), min(max(y, 0.0), height)
        x2, y2 = min(max(x + w, 0.0), width), min(max(y + h, 0.0), height)
        if x2 - x1 <= 0 or y2 - y1 <= 0:
            skipped_empty += 1
            continue
        box = Box.from_xyxy(x1 / width, y1 / height, x2 / width, y2 / height)
        image['boxes'].append(box.as_list())
        image['labels'].append(dense[category])

    if skipped_empty:
        logger.warning(f"⚠️  Skipped {skipped_empty} zero-area annotations in {annotation_path.name}")
    if skipped_crowd:
        logger.warning(f"⚠️  Skipped {skipped_crowd} crowd annotations in {annotation_path.name}")

    records = []
    for image_id, image in images.items():
        file_name = image['file_name']
        records.append(DatasetRecord(
            image_id=image_id,
            width=image['width'],
            height=image['height'],
            boxes=np.asarray(image['boxes'], dtype=np.float64).reshape(-1, 4),
            labels=np.asarray(image['labels'], dtype=np.int64),
            path=str(image_root / file_name) if file_name else None,
            file_name=file_name,
        ))

    logger.info(f"📥 Loaded {len(records)} images and {len(categories)} categories from {annotation_path.name}")
    return DetectionDataset(records,
                            categories=[str(c.get('name', c['id'])) for c in categories],
                            category_ids=category_ids)


def coco_dict(dataset: DetectionDataset) -> Dict[str, Any]:
    """Ground truth as a COCO detection mapping"""
    images, annotations = [], []
    ann_id = 1
    for record in dataset:
        images.append({'id': record.image_id, 'width': record.width, 'height': record.height,
                       'file_name': record.file_name or f"{record.image_id:06d}.png"})
        for box, label in zip(record.gt_boxes(), record.labels.tolist()):
            bbox = box_to_coco_bbox(box, record.width, record.height)
            annotations.append({
                'id': ann_id,
                'image_id': record.image_id,
                'category_id': dataset.external_category(label),
                'bbox': bbox,
                'area': bbox[2] * bbox[3],
                'iscrowd': 0,
            })
            ann_id += 1
    categories = [{'id': cid, 'name': name}
                  for cid, name in zip(dataset.category_ids, dataset.categories)]
    return {'images': images, 'annotations': annotations, 'categories': categories}


def write_coco(dataset: DetectionDataset, out_dir: PathLike,
               annotation_name: str = 'annotations.json') -> Path:
    """Lossless PNGs under out_dir/images plus a COCO annotation file"""
    out_dir = Path(out_dir)
    image_dir = out_dir / 'images'
    image_dir.mkdir(parents=True, exist_ok=True)

    mapping = coco_dict(dataset)
    for record, entry in zip(dataset, mapping['images']):
        Image.fromarray(record.load_image()).save(image_dir / entry['file_name'])
        entry['file_name'] = f"images/{entry['file_name']}"

    annotation_path = out_dir / annotation_name
    tmp_path = annotation_path.with_suffix('.json.tmp')
    with open(tmp_path, 'w') as f:
        json.dump(mapping, f)
    os.replace(tmp_path, annotation_path)

    logger.info(f"💾 Wrote {len(dataset)} images and {len(mapping['annotations'])} annotations to {out_dir}")
    return annotation_path
