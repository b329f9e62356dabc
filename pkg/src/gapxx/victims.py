"""White-box victim classifiers: build, train, freeze, query.

All architectures take 3x32x32 inputs and emit 10 logits. The dataset/
architecture pairing matrix is fixed: MNIST pairs with MLP3/LeNet/ResNet18,
CIFAR10 with SENet18/ResNet18/VGG11.
"""

from __future__ import annotations

import enum
import hashlib
import json
import time
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    CheckpointError,
    CheckpointTypeError,
    ConfigurationError,
    InvalidInputError,
    TrainingFailureError,
)

CHECKPOINT_FORMAT_VERSION = 1
NUM_CLASSES = 10
INPUT_SHAPE = (3, 32, 32)


class VictimArch(enum.Enum):
    MLP3 = "mlp3"
    LENET = "lenet"
    RESNET18 = "resnet18"
    SENET18 = "senet18"
    VGG11 = "vgg11"

    @classmethod
    def parse(cls, name: str) -> "VictimArch":
        try:
            return cls(name.lower())
        except ValueError:
            raise ConfigurationError(f"unknown architecture {name!r}")


VALID_PAIRINGS = {
    "mnist": (VictimArch.MLP3, VictimArch.LENET, VictimArch.RESNET18),
    "cifar10": (VictimArch.SENET18, VictimArch.RESNET18, VictimArch.VGG11),
}


@dataclass(frozen=True)
class VictimSpec:
    architecture: VictimArch
    dataset: str
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        ds = self.dataset.lower()
        object.__setattr__(self, "dataset", ds)
        allowed = VALID_PAIRINGS.get(ds)
        if allowed is None:
            raise ConfigurationError(f"unknown dataset {self.dataset!r}; expected mnist or cifar10")
        if self.architecture not in allowed:
            raise ConfigurationError(
                f"({self.architecture.value}, {ds}) is not a supported pairing; "
                f"{ds} supports {[a.value for a in allowed]}"
            )


@dataclass
class ClassifierOutput:
    logits: torch.Tensor
    probabilities: torch.Tensor
    predicted_class: torch.Tensor


class MLP3(nn.Module):
    """3 fully connected layers: 3072 -> 512 -> 256 -> 10."""

    def __init__(self, num_classes=NUM_CLASSES):
        super().__init__()
        self.fc1 = nn.Linear(3 * 32 * 32, 512)
        self.fc2 = nn.Linear(512, 256)
        self.fc3 = nn.Linear(256, num_classes)

    def forward(self, x):
        x = x.flatten(1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return self.fc3(x)


class LeNet(nn.Module):
    def __init__(self, num_classes=NUM_CLASSES):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 6, 5)
        self.conv2 = nn.Conv2d(6, 16, 5)
        self.fc1 = nn.Linear(16 * 5 * 5, 120)
        self.fc2 = nn.Linear(120, 84)
        self.fc3 = nn.Linear(84, num_classes)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = x.flatten(1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return self.fc3(x)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class SEBasicBlock(BasicBlock):
    """BasicBlock with squeeze-and-excitation recalibration (reduction 16)."""

    def __init__(self, in_planes, planes, stride=1):
        super().__init__(in_planes, planes, stride)
        self.fc1 = nn.Conv2d(planes, planes // 16, 1)
        self.fc2 = nn.Conv2d(planes // 16, planes, 1)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        w = F.adaptive_avg_pool2d(out, 1)
        w = torch.sigmoid(self.fc2(F.relu(self.fc1(w))))
        return F.relu(out * w + self.shortcut(x))


class ResNet(nn.Module):
    """ResNet-18 layout adapted to 32x32 inputs (3x3 stem, no initial pooling)."""

    def __init__(self, block, num_blocks, num_classes=NUM_CLASSES):
        super().__init__()
        self.in_planes = 64
        self.conv1 = nn.Conv2d(3, 64, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.layer1 = self._make_layer(block, 64, num_blocks[0], 1)
        self.layer2 = self._make_layer(block, 128, num_blocks[1], 2)
        self.layer3 = self._make_layer(block, 256, num_blocks[2], 2)
        self.layer4 = self._make_layer(block, 512, num_blocks[3], 2)
        self.linear = nn.Linear(512, num_classes)

    def _make_layer(self, block, planes, count, stride):
        layers = []
        for s in [stride] + [1] * (count - 1):
            layers.append(block(self.in_planes, planes, s))
            self.in_planes = planes
        return nn.Sequential(*layers)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layer4(self.layer3(self.layer2(self.layer1(out))))
        out = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.linear(out)


VGG11_LAYOUT = [64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"]


class VGG11(nn.Module):
    def __init__(self, num_classes=NUM_CLASSES):
        super().__init__()
        layers, in_ch = [], 3
        for v in VGG11_LAYOUT:
            if v == "M":
                layers.append(nn.MaxPool2d(2))
            else:
                layers += [nn.Conv2d(in_ch, v, 3, padding=1), nn.BatchNorm2d(v), nn.ReLU(inplace=True)]
                in_ch = v
        self.features = nn.Sequential(*layers)
        self.classifier = nn.Linear(512, num_classes)

    def forward(self, x):
        return self.classifier(self.features(x).flatten(1))


def _build_net(arch: VictimArch, num_classes: int) -> nn.Module:
    if arch is VictimArch.MLP3:
        return MLP3(num_classes)
    if arch is VictimArch.LENET:
        return LeNet(num_classes)
    if arch is VictimArch.RESNET18:
        return ResNet(BasicBlock, [2, 2, 2, 2], num_classes)
    if arch is VictimArch.SENET18:
        return ResNet(SEBasicBlock, [2, 2, 2, 2], num_classes)
    if arch is VictimArch.VGG11:
        return VGG11(num_classes)
    raise ConfigurationError(f"no builder for {arch}")


def first_argmax(t: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Argmax with a guaranteed lowest-index tie break."""
    return (t == t.amax(dim=dim, keepdim=True)).float().cumsum(dim).eq(1.0).float().argmax(dim)


def first_argmin(t: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return first_argmax(-t, dim=dim)


class VictimClassifier(nn.Module):
    """A frozen differentiable classifier plus its provenance metadata.

    forward() exposes raw logits (and counts queries so attack code can
    assert its query budget); predict() wraps inference-mode outputs.
    """

    def __init__(self, spec: VictimSpec, net: nn.Module | None = None, metadata: dict | None = None):
        super().__init__()
        self.spec = spec
        self.net = net if net is not None else _build_net(spec.architecture, spec.num_classes)
        self.metadata = dict(metadata or {})
        self.query_count = 0
        self.grad_query_count = 0

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or tuple(x.shape[1:]) != INPUT_SHAPE:
            raise InvalidInputError(
                f"victim expects (N, 3, 32, 32) input, got shape {tuple(x.shape)}"
            )
        self.query_count += 1
        if torch.is_grad_enabled() and x.requires_grad:
            self.grad_query_count += 1
        return self.net(x)

    def freeze(self) -> "VictimClassifier":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    @torch.no_grad()
    def predict(self, x: torch.Tensor) -> ClassifierOutput:
        """Deterministic inference (normalization layers in inference statistics)."""
        was_training = self.training
        self.eval()
        try:
            if x.shape[0] == 0:
                empty = torch.empty(0, self.num_classes)
                return ClassifierOutput(empty, empty.clone(), torch.empty(0, dtype=torch.long))
            logits = self.forward(x)
        finally:
            self.train(was_training)
        return ClassifierOutput(logits, F.softmax(logits, dim=1), first_argmax(logits, dim=1))

    def predict_logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.predict(x).logits

    def least_likely_class(self, x: torch.Tensor) -> torch.Tensor:
        """Per example, the index of the minimum clean logit (lowest index on ties)."""
        logits = self.predict(x).logits
        if logits.shape[0] == 0:
            return torch.empty(0, dtype=torch.long)
        return first_argmin(logits, dim=1)

    def parameter_checksum(self) -> str:
        """SHA-256 over all parameters and buffers, in state_dict order."""
        h = hashlib.sha256()
        for name, tensor in self.state_dict().items():
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def build_victim(spec: VictimSpec) -> VictimClassifier:
    """Untrained victim for a valid (architecture, dataset) pairing."""
    victim = VictimClassifier(spec)
    victim.metadata.update(
        architecture=spec.architecture.value,
        dataset=spec.dataset,
        num_classes=spec.num_classes,
        parameter_count=sum(p.numel() for p in victim.parameters()),
        layer_sequence=[type(m).__name__ for m in victim.net.children()],
    )
    return victim


@torch.no_grad()
def evaluate_accuracy(victim: VictimClassifier, images: torch.Tensor, labels: torch.Tensor,
                      batch_size: int = 512) -> float:
    """Clean accuracy in percent."""
    correct = 0
    for i in range(0, images.shape[0], batch_size):
        out = victim.predict(images[i:i + batch_size])
        correct += (out.predicted_class == labels[i:i + batch_size]).sum().item()
    return 100.0 * correct / max(1, images.shape[0])


def train_victim(
    victim: VictimClassifier,
    train_images: torch.Tensor,
    train_labels: torch.Tensor,
    val_images: torch.Tensor,
    val_labels: torch.Tensor,
    epochs: int = 10,
    batch_size: int = 128,
    lr: float = 0.05,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
    seed: int = 0,
    target_av: float | None = None,
    target_tolerance: float = 1.0,
    log_fn=None,
) -> tuple[VictimClassifier, float]:
    """SGD training until the epoch budget runs out or validation accuracy
    enters the requested window; returns the frozen victim and its AV%.

    Divergence (non-finite loss) raises TrainingFailureError carrying the
    epoch-boundary snapshot of the last good state.
    """
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.SGD(victim.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, epochs))
    n = train_images.shape[0]
    last_good = {k: v.clone() for k, v in victim.state_dict().items()}
    best_av = 0.0

    for epoch in range(epochs):
        victim.train()
        perm = torch.randperm(n, generator=gen)
        running, steps = 0.0, 0
        for i in range(0, n, batch_size):
            idx = perm[i:i + batch_size]
            opt.zero_grad()
            logits = victim(train_images[idx])
            loss = F.cross_entropy(logits, train_labels[idx])
            if not torch.isfinite(loss):
                victim.load_state_dict(last_good)
                victim.freeze()
                raise TrainingFailureError(
                    f"victim training diverged at epoch {epoch}", last_good_checkpoint=last_good
                )
            loss.backward()
            opt.step()
            running += loss.item()
            steps += 1
        sched.step()
        last_good = {k: v.clone() for k, v in victim.state_dict().items()}
        av = evaluate_accuracy(victim, val_images, val_labels)
        best_av = max(best_av, av)
        if log_fn:
            log_fn(epoch=epoch, train_loss=running / max(1, steps), val_accuracy=av)
        if target_av is not None and abs(av - target_av) <= target_tolerance:
            break

    victim.freeze()
    av = evaluate_accuracy(victim, val_images, val_labels)
    victim.metadata["av_percent"] = av
    victim.metadata["seed"] = seed
    return victim, av


def save_victim(victim: VictimClassifier, path) -> None:
    """Parameter archive at <path> plus a human-readable JSON sidecar."""
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "victim",
            "state_dict": victim.state_dict(),
        },
        path,
    )
    sidecar = {
        "kind": "victim",
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": victim.spec.architecture.value,
        "dataset": victim.spec.dataset,
        "num_classes": victim.spec.num_classes,
        "parameter_checksum": victim.parameter_checksum(),
        "created_unix": time.time(),
        **{k: v for k, v in victim.metadata.items() if not isinstance(v, torch.Tensor)},
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, default=str) + "\n")


def load_victim(path) -> VictimClassifier:
    from pathlib import Path

    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"victim checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or "kind" not in payload:
        raise CheckpointError(f"{path} is not a toolkit checkpoint")
    if payload["kind"] != "victim":
        raise CheckpointTypeError(f"{path} holds a {payload['kind']!r} checkpoint, not a victim")
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has format version {payload.get('format_version')}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise CheckpointError(f"missing metadata sidecar: {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    spec = VictimSpec(VictimArch.parse(meta["architecture"]), meta["dataset"], meta["num_classes"])
    victim = VictimClassifier(spec, metadata=meta)
    victim.load_state_dict(payload["state_dict"])
    return victim.freeze()
