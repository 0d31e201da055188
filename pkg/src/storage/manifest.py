"""
Run manifests: everything needed to reproduce a CLI run
"""

import json
import logging
import os
import subprocess
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Union

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'run_manifest.json'


def source_revision() -> str:
    """git commit of the source tree, or 'unknown' outside a checkout"""
    try:
        out = subprocess.run(['git', 'rev-parse', 'HEAD'], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return 'unknown'
    return out.stdout.strip() if out.returncode == 0 else 'unknown'


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: Dict[str, Any]
    seed: Optional[int]
    revision: str = field(default_factory=source_revision)
    started_at: str = field(default_factory=lambda: datetime.now().isoformat(timespec='seconds'))
    finished_at: Optional[str] = None
    status: str = 'running'
    artifacts: Dict[str, str] = field(default_factory=dict)
    error: Optional[str] = None


class ManifestStore:
    """Writes the manifest of one run into its output directory"""

    def __init__(self, out_dir: Union[str, Path]):
        self.path = Path(out_dir) / MANIFEST_NAME

    def write(self, manifest: RunManifest) -> Path:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp_path = self.path.with_name(self.path.name + '.tmp')
        with open(tmp_path, 'w') as f:
            json.dump(asdict(manifest), f, indent=2)
        os.replace(tmp_path, self.path)
        return self.path

    def start(self, manifest: RunManifest) -> RunManifest:
        self.write(manifest)
        logger.info(f"📝 Run manifest at {self.path}")
        return manifest

    def finish(self, manifest: RunManifest, status: str = 'succeeded') -> RunManifest:
        manifest.finished_at = datetime.now().isoformat(timespec='seconds')
        manifest.status = status
        self.write(manifest)
        return manifest

    @contextmanager
    def recording(self, manifest: RunManifest) -> Iterator[RunManifest]:
        """Start the manifest, then finish it as succeeded or failed with the error text"""
        self.start(manifest)
        try:
            yield manifest
        except Exception as e:
            manifest.error = f"{type(e).__name__}: {e}"
            self.finish(manifest, status='failed')
            logger.error(f"❌ {manifest.command} failed; manifest at {self.path}")
            raise
        self.finish(manifest)

    def read(self) -> Dict[str, Any]:
        with open(self.path, 'r') as f:
            return json.load(f)
