"""
Line-delimited JSON metrics, one record per logged training iteration
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

logger = logging.getLogger(__name__)

LOSS_FIELDS = ('iteration', 'total', 'cls', 'l1', 'giou', 'sigma_t', 'sigma_tm1', 'lr')


class MetricsWriter:
    """Appends JSON records to a .jsonl file; path=None keeps them in memory only"""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path else None
        self.records: List[Dict[str, Any]] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: Dict[str, Any]):
        self.records.append(record)
        if self.path:
            with open(self.path, 'a') as f:
                f.write(json.dumps(record, sort_keys=True) + '\n')

    def diverged(self, record: Dict[str, Any]):
        self.write(dict(record, event='diverged'))


def read_metrics(path: Union[str, Path]) -> List[Dict[str, Any]]:
    with open(path, 'r') as f:
        return [json.loads(line) for line in f if line.strip()]
