"""Conditional perturbation network: encoder, residual trunk, condition
concatenation, decoder. Output is an unscaled perturbation field in [-1, 1];
all magnitude control is delegated to the budget module."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .errors import (
    CheckpointError,
    CheckpointTypeError,
    InvalidInputError,
)

CHECKPOINT_FORMAT_VERSION = 1


def encode_condition(label: int | None, num_classes: int) -> torch.Tensor:
    """One-hot vector for a class index, all-zero vector when label is None."""
    vec = torch.zeros(num_classes)
    if label is not None:
        if not 0 <= int(label) < num_classes:
            raise InvalidInputError(f"label {label} out of range [0, {num_classes})")
        vec[int(label)] = 1.0
    return vec


def encode_condition_batch(labels, num_classes: int, batch_size: int | None = None) -> torch.Tensor:
    """Rows of one-hot (or zero) conditions; labels None means all untargeted."""
    if labels is None:
        if batch_size is None:
            raise InvalidInputError("batch_size required when labels is None")
        return torch.zeros(batch_size, num_classes)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise InvalidInputError(f"labels out of range [0, {num_classes})")
    return torch.nn.functional.one_hot(labels, num_classes).to(torch.float32)


def inject_condition(trunk_features: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
    """Broadcast cond to constant spatial planes and concatenate on channels.

    A zero condition appends all-zero planes and leaves trunk features
    untouched; output channel count = trunk channels + condition length.
    """
    n, _, h, w = trunk_features.shape
    if cond.dim() != 2 or cond.shape[0] != n:
        raise InvalidInputError(
            f"condition batch {tuple(cond.shape)} does not match feature batch {n}"
        )
    planes = cond[:, :, None, None].expand(n, cond.shape[1], h, w)
    return torch.cat([trunk_features, planes.to(trunk_features.dtype)], dim=1)


@dataclass(frozen=True)
class GeneratorConfig:
    input_shape: tuple[int, int, int] = (3, 32, 32)
    condition_dim: int = 10  # 0 disables conditioning (single-target baseline)
    downsample_stages: int = 3
    residual_blocks: int = 4
    base_channels: int = 64
    output_activation: str = "tanh"


class ConvNormRelu(nn.Module):
    def __init__(self, cin, cout, transpose=False, **kwargs):
        super().__init__()
        conv = nn.ConvTranspose2d if transpose else nn.Conv2d
        self.block = nn.Sequential(
            conv(cin, cout, **kwargs),
            nn.InstanceNorm2d(cout, affine=True),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class PerturbationGenerator(nn.Module):
    """g(x, condition) -> delta with delta.shape == x.shape and |delta| <= 1.

    The condition vector is injected after the residual trunk, broadcast as
    constant planes and concatenated before the transposed convolutions.
    """

    def __init__(self, config: GeneratorConfig = GeneratorConfig(), metadata: dict | None = None):
        super().__init__()
        self.config = config
        self.metadata = dict(metadata or {})
        c_in = config.input_shape[0]
        ch = config.base_channels

        encoder = [ConvNormRelu(c_in, ch, kernel_size=3, stride=2, padding=1)]
        for _ in range(config.downsample_stages - 1):
            encoder.append(ConvNormRelu(ch, ch * 2, kernel_size=3, stride=2, padding=1))
            ch *= 2
        self.encoder = nn.Sequential(*encoder)

        self.trunk = nn.Sequential(*[ResidualBlock(ch) for _ in range(config.residual_blocks)])

        decoder = []
        ch_dec = ch + config.condition_dim
        for _ in range(config.downsample_stages - 1):
            decoder.append(ConvNormRelu(ch_dec, ch // 2, transpose=True,
                                        kernel_size=3, stride=2, padding=1, output_padding=1))
            ch_dec = ch // 2
            ch //= 2
        decoder.append(nn.ConvTranspose2d(ch_dec, c_in, 3, stride=2, padding=1, output_padding=1))
        self.decoder = nn.Sequential(*decoder)
        if config.output_activation != "tanh":
            raise InvalidInputError(f"unsupported output activation {config.output_activation!r}")

    @property
    def condition_dim(self) -> int:
        return self.config.condition_dim

    def forward(self, x: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        if x.dim() != 4 or tuple(x.shape[1:]) != tuple(self.config.input_shape):
            raise InvalidInputError(
                f"generator expects (N, {', '.join(map(str, self.config.input_shape))}), "
                f"got {tuple(x.shape)}"
            )
        feats = self.trunk(self.encoder(x))
        if self.condition_dim:
            if cond is None:
                raise InvalidInputError("a conditional generator needs a condition batch")
            if cond.shape != (x.shape[0], self.condition_dim):
                raise InvalidInputError(
                    f"condition batch {tuple(cond.shape)} does not match "
                    f"(batch={x.shape[0]}, C={self.condition_dim})"
                )
            feats = inject_condition(feats, cond)
        return torch.tanh(self.decoder(feats))

    def freeze(self) -> "PerturbationGenerator":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def save_generator(gen: PerturbationGenerator, path) -> None:
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = gen.config
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "generator",
            "config": {
                "input_shape": tuple(cfg.input_shape),
                "condition_dim": cfg.condition_dim,
                "downsample_stages": cfg.downsample_stages,
                "residual_blocks": cfg.residual_blocks,
                "base_channels": cfg.base_channels,
                "output_activation": cfg.output_activation,
            },
            "state_dict": gen.state_dict(),
        },
        path,
    )
    sidecar = {
        "kind": "generator",
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "condition_dim": cfg.condition_dim,
        "created_unix": time.time(),
        **{k: v for k, v in gen.metadata.items() if not isinstance(v, torch.Tensor)},
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, default=str) + "\n")


def load_generator(path) -> PerturbationGenerator:
    from pathlib import Path

    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"generator checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or "kind" not in payload:
        raise CheckpointError(f"{path} is not a toolkit checkpoint")
    if payload["kind"] != "generator":
        raise CheckpointTypeError(f"{path} holds a {payload['kind']!r} checkpoint, not a generator")
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has format version {payload.get('format_version')}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    raw = dict(payload["config"])
    raw["input_shape"] = tuple(raw["input_shape"])
    metadata = {}
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        metadata = json.loads(sidecar.read_text())
    gen = PerturbationGenerator(GeneratorConfig(**raw), metadata=metadata)
    gen.load_state_dict(payload["state_dict"])
    return gen.freeze()
