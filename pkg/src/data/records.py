"""
In-memory detection dataset: one DatasetRecord per image
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional

import numpy as np
from PIL import Image

from src.errors import DatasetError
from src.geometry.boxes import Box

logger = logging.getLogger(__name__)


@dataclass
class DatasetRecord:
    """
    One image and its ground truth. Boxes are normalized cxcywh (k, 4),
    labels dense category indices (k,). Either `image` or `path` is set.
    """

    image_id: int
    width: int
    height: int
    boxes: np.ndarray
    labels: np.ndarray
    image: Optional[np.ndarray] = None
    path: Optional[str] = None
    file_name: Optional[str] = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise DatasetError(f"image {self.image_id}: {len(self.boxes)} boxes but {len(self.labels)} labels")

    @property
    def num_objects(self) -> int:
        return int(len(self.labels))

    def gt_boxes(self) -> List[Box]:
        return [Box(*row) for row in self.boxes.tolist()]

    def load_image(self) -> np.ndarray:
        """H x W x 3 uint8 pixels"""
        if self.image is not None:
            return self.image
        if self.path is None:
            raise DatasetError(f"image {self.image_id} has neither pixels nor a path")
        try:
            with Image.open(self.path) as img:
                return np.array(img.convert('RGB'))
        except OSError as e:
            raise DatasetError(f"cannot read image {self.path}: {e}") from e


@dataclass
class DetectionDataset:
    """
    Records plus the category table. `category_ids[i]` is the external
    (COCO) id of dense class i.
    """

    records: List[DatasetRecord]
    categories: List[str]
    category_ids: List[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.category_ids:
            self.category_ids = list(range(1, len(self.categories) + 1))
        self._by_id: Dict[int, DatasetRecord] = {r.image_id: r for r in self.records}
        if len(self._by_id) != len(self.records):
            raise DatasetError("duplicate image ids in dataset")
        for record in self.records:
            if record.num_objects and (record.labels.min() < 0 or record.labels.max() >= self.num_classes):
                raise DatasetError(f"image {record.image_id} has a label outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> DatasetRecord:
        return self.records[index]

    def __iter__(self) -> Iterator[DatasetRecord]:
        return iter(self.records)

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    @property
    def image_ids(self) -> List[int]:
        return [r.image_id for r in self.records]

    def by_id(self, image_id: int) -> DatasetRecord:
        try:
            return self._by_id[image_id]
        except KeyError:
            raise DatasetError(f"unknown image id {image_id}") from None

    def has_image(self, image_id: int) -> bool:
        return image_id in self._by_id

    def external_category(self, label: int) -> int:
        if not (0 <= label < len(self.category_ids)):
            raise DatasetError(f"label {label} outside the {len(self.category_ids)} dataset categories")
        return self.category_ids[label]

    def dense_category(self, external_id: int) -> int:
        try:
            return self.category_ids.index(external_id)
        except ValueError:
            raise DatasetError(f"unknown category id {external_id}") from None


def load_image_dir(image_dir, categories: List[str]) -> DetectionDataset:
    """Unannotated images from a directory, for inference; unreadable files are skipped"""
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise DatasetError(f"image directory not found: {image_dir}")
    records = []
    for i, path in enumerate(sorted(p for p in image_dir.iterdir() if p.is_file()), 1):
        try:
            with Image.open(path) as img:
                width, height = img.size
        except OSError as e:
            logger.warning(f"⚠️  Skipping unreadable image {path.name}: {e}")
            continue
        records.append(DatasetRecord(image_id=i, width=width, height=height,
                                     boxes=np.zeros((0, 4)), labels=np.zeros(0),
                                     path=str(path), file_name=path.name))
    return DetectionDataset(records, categories=list(categories))
