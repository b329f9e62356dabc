import os
from pathlib import Path

import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

REPO_ROOT = Path(__file__).resolve().parents[1]
RUNS_DIR = Path(os.environ.get("GAPXX_RUNS_DIR", REPO_ROOT / "runs"))


def dataset_cached(name: str, split: str) -> bool:
    from gapxx.data import default_cache_dir

    return (default_cache_dir() / "canonical" / f"{name}_{split}.npz").exists()


def require_dataset(name: str, split: str = "validation"):
    if not dataset_cached(name, split):
        pytest.skip(f"{name}/{split} cache not present; ingest it first (see README)")


def require_artifact(relpath: str) -> Path:
    path = RUNS_DIR / relpath
    if not path.exists():
        pytest.skip(f"missing trained artifact {path}; produce it with scripts/ (see README)")
    return path


class ToyVictim(nn.Module):
    """Duck-typed 4-class victim over tiny images, for gradient oracles."""

    def __init__(self, channels=3, side=2, num_classes=4, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.num_classes = num_classes
        self.fc1 = nn.Linear(channels * side * side, 8)
        self.fc2 = nn.Linear(8, num_classes)
        self.query_count = 0
        self.grad_query_count = 0

    def forward(self, x):
        self.query_count += 1
        return self.fc2(torch.tanh(self.fc1(x.flatten(1))))

    @torch.no_grad()
    def predict(self, x):
        from gapxx.victims import ClassifierOutput, first_argmax

        logits = self.forward(x)
        return ClassifierOutput(logits, F.softmax(logits, dim=1), first_argmax(logits, 1))

    def least_likely_class(self, x):
        from gapxx.victims import first_argmin

        return first_argmin(self.predict(x).logits, dim=1)

    def freeze(self):
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


class ToyGenerator(nn.Module):
    """2x2 conditional generator: 1x1 convs only, so any spatial size works."""

    def __init__(self, channels=3, condition_dim=4, hidden=6, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.condition_dim = condition_dim
        self.conv1 = nn.Conv2d(channels + condition_dim, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, channels, 1)
        self.metadata = {}

    def forward(self, x, cond=None):
        if self.condition_dim:
            planes = cond[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
            x = torch.cat([x, planes], dim=1)
        return torch.tanh(self.conv2(torch.relu(self.conv1(x))))

    def freeze(self):
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


@pytest.fixture
def toy_victim():
    return ToyVictim().freeze()


@pytest.fixture
def toy_generator():
    return ToyGenerator()


@pytest.fixture
def image_batch():
    torch.manual_seed(7)
    return torch.rand(6, 3, 32, 32)


@pytest.fixture
def tiny_image_batch():
    torch.manual_seed(11)
    return torch.rand(5, 3, 2, 2)
