"""Run manifests, metrics streams, and seeding.

Every artifact directory holds exactly one manifest (manifest.jsonl) to
which run records are appended, never rewritten. Metrics are line-delimited
JSON records in the same directory.
"""

from __future__ import annotations

import json
import platform
import random
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .errors import OutputExistsError

MANIFEST_NAME = "manifest.jsonl"
METRICS_NAME = "metrics.jsonl"


def toolkit_version() -> str:
    try:
        from importlib.metadata import version

        return version("gapxx")
    except Exception:
        return "unknown"


def seed_everything(seed: int) -> torch.Generator:
    """Seed torch/numpy/random and return a dedicated torch.Generator."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def hardware_note() -> str:
    return (
        f"{platform.machine()} cpu x{torch.get_num_threads()} thread(s), "
        f"python {sys.version.split()[0]}, torch {torch.__version__}, cuda={torch.cuda.is_available()}"
    )


def determinism_note() -> str:
    # single-device CPU arithmetic is bitwise reproducible under a fixed seed
    return "bitwise (cpu)" if not torch.cuda.is_available() else "tolerance 1e-6 (gpu backend)"


def prepare_out_dir(path, force: bool = False) -> Path:
    """Create an artifact directory; refuse non-empty collisions without force."""
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise OutputExistsError(f"output directory {path} exists and is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


class Manifest:
    """Append-only JSONL manifest for one artifact directory."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / MANIFEST_NAME

    def append(self, event: str, **fields) -> dict:
        record = {
            "event": event,
            "timestamp_unix": time.time(),
            "toolkit_version": toolkit_version(),
            **fields,
        }
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, default=str) + "\n")
        return record

    def append_run_start(self, subcommand: str, resolved_config: dict, seed: int, **fields) -> dict:
        return self.append(
            "run-start",
            subcommand=subcommand,
            argv=sys.argv,
            resolved_config=resolved_config,
            seed=seed,
            hardware=hardware_note(),
            determinism=determinism_note(),
            **fields,
        )

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]


class MetricsLog:
    """Append-only line-delimited metrics stream."""

    def __init__(self, out_dir=None):
        self.path = Path(out_dir) / METRICS_NAME if out_dir is not None else None
        self.records: list[dict] = []

    def log(self, **fields) -> dict:
        record = {"timestamp_unix": time.time(), **fields}
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, default=str) + "\n")
        return record
