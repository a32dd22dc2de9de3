"""Run manifests: what a subcommand was asked to do and what it wrote.

One ``<subcommand>.manifest.json`` is written next to a run's outputs. No
wall-clock fields are recorded, so identical runs give identical manifests.
"""

import hashlib
import json
import logging
import os
from typing import Dict, Iterable, List, Optional

from csv_helper import ensure_parent
from settings import TOOL_VERSION

logger = logging.getLogger(__name__)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    def __init__(self, subcommand: str, config: Dict, seed: Optional[int] = None):
        self.subcommand = subcommand
        self.config = dict(config)
        self.seed = seed
        self.inputs: Dict[str, str] = {}
        self.outputs: List[str] = []
        self.tool_version = TOOL_VERSION

    def add_inputs(self, paths: Iterable[Optional[str]]):
        for path in paths:
            if path:
                self.inputs[os.path.basename(path)] = file_digest(path)

    def add_output(self, path: str):
        self.outputs.append(os.path.basename(path))

    def to_dict(self):
        return {
            "subcommand": self.subcommand,
            "config": self.config,
            "inputs": dict(sorted(self.inputs.items())),
            "seed": self.seed,
            "outputs": list(self.outputs),
            "tool_version": self.tool_version,
        }

    def write(self, out_dir) -> str:
        path = os.path.join(out_dir, f"{self.subcommand}.manifest.json")
        ensure_parent(path)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True, default=str)
            f.write('\n')
        logger.info(f"Wrote run manifest {path}")
        return path


def read_manifest(path) -> Dict:
    with open(path, encoding='utf-8') as f:
        return json.load(f)
