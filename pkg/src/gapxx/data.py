"""Dataset ingestion: MNIST/CIFAR10 to canonical 3x32x32 tensors in [0,1].

Raw sources are the parquet exports of the two benchmarks. They are looked
up in the cache directory and fetched through huggingface_hub when absent
(honoring HF_ENDPOINT for mirrored environments). Canonical tensors are
memoized as .npz archives with a content checksum; ingestion order is the
source row order, so re-ingestion reproduces identical checksums.
"""

from __future__ import annotations

import enum
import hashlib
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import IngestionError

CACHE_ENV_VAR = "GAPXX_CACHE_DIR"


class DatasetName(enum.Enum):
    MNIST = "mnist"
    CIFAR10 = "cifar10"

    @classmethod
    def parse(cls, name: str) -> "DatasetName":
        try:
            return cls(name.lower())
        except ValueError:
            raise IngestionError(f"unknown dataset {name!r}; expected mnist or cifar10")


class Split(enum.Enum):
    TRAIN = "train"
    VALIDATION = "validation"


# (hub repo, parquet path, image column); VALIDATION maps to the benchmark's
# held-out test partition.
_SOURCES = {
    (DatasetName.MNIST, Split.TRAIN): ("ylecun/mnist", "mnist/train-00000-of-00001.parquet", "image"),
    (DatasetName.MNIST, Split.VALIDATION): ("ylecun/mnist", "mnist/test-00000-of-00001.parquet", "image"),
    (DatasetName.CIFAR10, Split.TRAIN): ("uoft-cs/cifar10", "plain_text/train-00000-of-00001.parquet", "img"),
    (DatasetName.CIFAR10, Split.VALIDATION): ("uoft-cs/cifar10", "plain_text/test-00000-of-00001.parquet", "img"),
}

EXPECTED_COUNTS = {
    (DatasetName.MNIST, Split.TRAIN): 60000,
    (DatasetName.MNIST, Split.VALIDATION): 10000,
    (DatasetName.CIFAR10, Split.TRAIN): 50000,
    (DatasetName.CIFAR10, Split.VALIDATION): 10000,
}


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV_VAR, Path.home() / ".cache" / "gapxx"))


@dataclass
class DatasetHandle:
    """Canonicalized split: uint8 storage, float [0,1] views on demand."""

    name: DatasetName
    split: Split
    images_u8: torch.Tensor  # (N, 3, 32, 32) uint8
    labels: torch.Tensor  # (N,) int64
    checksum: str

    def __len__(self) -> int:
        return self.images_u8.shape[0]

    def images(self, idx=None) -> torch.Tensor:
        """Float32 images in [0,1]; idx selects a subset without copying the rest."""
        u8 = self.images_u8 if idx is None else self.images_u8[idx]
        return u8.to(torch.float32) / 255.0

    def subset(self, idx) -> "DatasetHandle":
        return DatasetHandle(self.name, self.split, self.images_u8[idx], self.labels[idx], self.checksum)


def _checksum(images: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(images.tobytes())
    h.update(labels.tobytes())
    return h.hexdigest()


def _canonicalize(raw_parquet: Path, image_column: str, name: DatasetName) -> tuple[np.ndarray, np.ndarray]:
    import polars as pl

    try:
        df = pl.read_parquet(raw_parquet)
    except Exception as e:
        raise IngestionError(f"corrupt parquet source {raw_parquet}: {e}") from e
    if image_column not in df.columns or "label" not in df.columns:
        raise IngestionError(
            f"{raw_parquet} lacks expected columns ({image_column!r}, 'label'); got {df.columns}"
        )
    n = len(df)
    images = np.empty((n, 3, 32, 32), dtype=np.uint8)
    labels = df["label"].to_numpy().astype(np.int64)
    for i, cell in enumerate(df[image_column]):
        im = Image.open(io.BytesIO(cell["bytes"]))
        if name is DatasetName.MNIST:
            # 28x28 grayscale: rescale to 32x32, replicate to 3 channels
            im = im.resize((32, 32), Image.BILINEAR).convert("RGB")
        else:
            im = im.convert("RGB")
            if im.size != (32, 32):
                im = im.resize((32, 32), Image.BILINEAR)
        images[i] = np.asarray(im, dtype=np.uint8).transpose(2, 0, 1)
    return images, labels


def _fetch_raw(name: DatasetName, split: Split, cache_dir: Path) -> Path:
    repo, filename, _ = _SOURCES[(name, split)]
    local = cache_dir / "raw" / name.value / Path(filename).name
    if local.exists():
        return local
    local.parent.mkdir(parents=True, exist_ok=True)
    try:
        from huggingface_hub import hf_hub_download

        fetched = hf_hub_download(
            repo_id=repo, filename=filename, repo_type="dataset",
            cache_dir=str(cache_dir / "hub"),
        )
    except Exception as e:
        raise IngestionError(
            f"raw dataset file {local} is missing and could not be downloaded "
            f"({repo}/{filename}): {e}"
        ) from e
    local.symlink_to(Path(fetched).resolve())
    return local


def ingest_dataset(name, split, cache_dir=None) -> DatasetHandle:
    """Canonical, checksummed, memoized tensors for one dataset split.

    Raises IngestionError naming the offending file when sources are missing
    or corrupt. Every ingest asserts the [0,1] pixel contract and the public
    cardinality of the split.
    """
    name = name if isinstance(name, DatasetName) else DatasetName.parse(str(name))
    split = split if isinstance(split, Split) else Split(str(split).lower())
    cache_dir = Path(cache_dir) if cache_dir else default_cache_dir()
    canon = cache_dir / "canonical" / f"{name.value}_{split.value}.npz"
    meta_path = canon.with_suffix(".json")

    if canon.exists():
        try:
            with np.load(canon) as z:
                images, labels = z["images"], z["labels"]
        except Exception as e:
            raise IngestionError(f"corrupt canonical cache {canon}: {e}") from e
    else:
        _, _, column = _SOURCES[(name, split)]
        raw = _fetch_raw(name, split, cache_dir)
        images, labels = _canonicalize(raw, column, name)
        canon.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(canon, images=images, labels=labels)

    checksum = _checksum(images, labels)
    if meta_path.exists():
        recorded = json.loads(meta_path.read_text()).get("checksum")
        if recorded != checksum:
            raise IngestionError(f"checksum mismatch for {canon}: cache is corrupt")
    else:
        meta_path.write_text(json.dumps(
            {"dataset": name.value, "split": split.value, "count": int(images.shape[0]),
             "checksum": checksum}, indent=2) + "\n")

    expected = EXPECTED_COUNTS[(name, split)]
    if images.shape[0] != expected:
        raise IngestionError(
            f"{canon} holds {images.shape[0]} examples, expected {expected}"
        )
    handle = DatasetHandle(
        name=name, split=split,
        images_u8=torch.from_numpy(images), labels=torch.from_numpy(labels),
        checksum=checksum,
    )
    probe = handle.images(slice(0, min(256, len(handle))))
    if probe.min() < 0.0 or probe.max() > 1.0:
        raise IngestionError(f"canonical tensors out of [0,1] for {canon}")
    if handle.labels.min() < 0 or handle.labels.max() > 9:
        raise IngestionError(f"labels out of range 0-9 for {canon}")
    return handle
