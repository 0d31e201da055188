"""
COCO results files: [{image_id, category_id, bbox [x, y, w, h] px, score}]
"""

import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Mapping, Union

from src.data.records import DetectionDataset
from src.errors import EvaluationError
from src.geometry.boxes import Detection, box_to_coco_bbox, coco_bbox_to_box

logger = logging.getLogger(__name__)

RESULT_KEYS = ('image_id', 'category_id', 'bbox', 'score')


def detections_to_coco(detections: Mapping[int, List[Detection]], dataset: DetectionDataset) -> List[Dict]:
    results = []
    for image_id, dets in detections.items():
        record = dataset.by_id(image_id)
        for det in dets:
            results.append({
                'image_id': image_id,
                'category_id': dataset.external_category(det.category),
                'bbox': [round(v, 4) for v in box_to_coco_bbox(det.box, record.width, record.height)],
                'score': round(det.score, 6),
            })
    return results


def write_results(results: List[Dict], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + '.tmp')
    with open(tmp_path, 'w') as f:
        json.dump(results, f)
    os.replace(tmp_path, path)
    logger.info(f"💾 Wrote {len(results)} detections to {path}")
    return path


def load_results(path: Union[str, Path], dataset: DetectionDataset) -> Dict[int, List[Detection]]:
    """Results file -> detections keyed by image id, dense categories"""
    path = Path(path)
    if not path.exists():
        raise EvaluationError(f"results file not found: {path}")
    try:
        with open(path, 'r') as f:
            results = json.load(f)
    except json.JSONDecodeError as e:
        raise EvaluationError(f"malformed results file {path} at offset {e.pos}: {e.msg}") from e
    if not isinstance(results, list):
        raise EvaluationError(f"{path} must hold a JSON array of detections")

    detections: Dict[int, List[Detection]] = {}
    for position, entry in enumerate(results):
        _check_entry(entry, position)
        image_id = int(entry['image_id'])
        if not dataset.has_image(image_id):
            raise EvaluationError(f"result references unknown image id {image_id}")
        if entry['category_id'] not in dataset.category_ids:
            raise EvaluationError(f"result references unknown category id {entry['category_id']}")
        record = dataset.by_id(image_id)
        detections.setdefault(image_id, []).append(Detection(
            box=coco_bbox_to_box(entry['bbox'], record.width, record.height),
            category=dataset.dense_category(entry['category_id']),
            score=float(entry['score']),
        ))
    return detections


def _check_entry(entry, position: int):
    if not isinstance(entry, dict):
        raise EvaluationError(f"result {position} is not an object")
    missing = [key for key in RESULT_KEYS if key not in entry]
    if missing:
        raise EvaluationError(f"result {position} lacks {', '.join(missing)}")
    bbox = entry['bbox']
    if not (isinstance(bbox, list) and len(bbox) == 4 and all(isinstance(v, (int, float)) for v in bbox)):
        raise EvaluationError(f"result {position} bbox must be 4 numbers, got {bbox!r}")
    if not isinstance(entry['score'], (int, float)) or isinstance(entry['score'], bool):
        raise EvaluationError(f"result {position} score must be a number, got {entry['score']!r}")
