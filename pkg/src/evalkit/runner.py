"""
Run the sampler over a dataset and score it
"""

import logging
from typing import Dict, List, Tuple

from tqdm.auto import tqdm

from src.data.records import DetectionDataset
from src.errors import DatasetError
from src.evalkit.coco_eval import EvalReport, evaluate
from src.geometry.boxes import Detection
from src.sampler.sampler import SamplerConfig, sample_batch

logger = logging.getLogger(__name__)


def detect_dataset(model, dataset: DetectionDataset, config: SamplerConfig,
                   progress: bool = False) -> Tuple[Dict[int, List[Detection]], List[float]]:
    """
    Detections keyed by image id plus per-image seconds. Images that
    cannot be read are logged and skipped.
    """
    detections: Dict[int, List[Detection]] = {}
    seconds: List[float] = []
    for record in tqdm(dataset, disable=not progress, desc='detect'):
        try:
            image = record.load_image()
        except DatasetError as e:
            logger.error(f"❌ Skipping image {record.image_id}: {e}")
            continue
        result = sample_batch([image], model, config=config, image_ids=[record.image_id])
        detections[record.image_id] = result.detections[0]
        seconds.append(result.seconds[0])
    return detections, seconds


def evaluate_model(model, dataset: DetectionDataset, config: SamplerConfig,
                   progress: bool = False) -> Tuple[EvalReport, List[float]]:
    detections, seconds = detect_dataset(model, dataset, config, progress)
    return evaluate(detections, dataset), seconds
