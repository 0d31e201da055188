"""
Checkpoint blobs on disk: model + EMA + optimizer state, written atomically
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch

from src.config.settings import build_settings
from src.decoder.consistency import build_detector
from src.errors import CheckpointError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class CheckpointStore:
    """Checkpoint directory of a run"""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def path_for(self, iteration: int) -> Path:
        return self.directory / f"checkpoint_{iteration:07d}.pt"

    @property
    def final_path(self) -> Path:
        return self.directory / 'checkpoint_final.pt'

    def save(self, blob: Dict[str, Any], iteration: Optional[int] = None, final: bool = False) -> Path:
        path = self.final_path if final else self.path_for(iteration)
        save_checkpoint(blob, path)
        return path


def save_checkpoint(blob: Dict[str, Any], path: Union[str, Path]) -> Path:
    """Write to a temp file then rename so readers never see a partial blob"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = dict(blob, format_version=FORMAT_VERSION)
    tmp_path = path.with_name(path.name + '.tmp')
    torch.save(blob, tmp_path)
    os.replace(tmp_path, path)
    logger.info(f"💾 Saved checkpoint {path}")
    return path


def load_checkpoint(path: Union[str, Path], map_location: str = 'cpu') -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location=map_location, weights_only=False)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(blob, dict) or blob.get('format_version') != FORMAT_VERSION:
        raise CheckpointError(f"{path} is not a format-{FORMAT_VERSION} checkpoint")
    for key in ('model', 'settings', 'num_classes'):
        if key not in blob:
            raise CheckpointError(f"{path} is missing '{key}'")
    return blob


def restore_detector(blob: Dict[str, Any], use_ema: bool = True, device: str = 'cpu'):
    """
    Rebuild the detector a checkpoint was trained with. The EMA
    weights are used for inference unless use_ema is False.
    Returns (model, settings).
    """
    settings = build_settings(blob['settings'])
    model = build_detector(settings.model, settings.schedule.to_schedule(), blob['num_classes'])
    weights = blob['ema'] if use_ema and 'ema' in blob else blob['model']
    try:
        model.load_state_dict(weights)
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint weights do not fit the configured model: {e}") from e
    model.to(device).eval()
    return model, settings
