"""Perturbation budgets: norm measurement, L-inf/L2 rescaling, L0 top-k, range clipping.

All operations are pure functions over image tensors shaped (C, H, W) or
batched (N, C, H, W); norms are always taken per image over all channels and
pixels jointly. Budgets live on the canonical [0, 1] pixel scale; values
quoted on a 0-255 scale are divided by 255 on ingestion.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import torch

from .errors import (
    InvalidBudgetError,
    InvalidInputError,
    UnmappedBudgetError,
    UnsupportedBudgetError,
)


class NormFamily(enum.Enum):
    LINF = "linf"
    L2 = "l2"
    L0 = "l0"

    @classmethod
    def parse(cls, name: str) -> "NormFamily":
        try:
            return cls(name.lower())
        except ValueError:
            raise UnsupportedBudgetError(f"unknown norm family {name!r}; expected linf, l2 or l0")


@dataclass(frozen=True)
class PerturbationBudget:
    """Norm family plus the single budget parameter that is meaningful for it.

    epsilon (pixel units, [0,1] scale) applies to LINF/L2; k (a count of
    retained tensor entries) applies to L0.
    """

    norm_family: NormFamily
    epsilon: float | None = None
    k: int | None = None

    def __post_init__(self):
        if self.norm_family is NormFamily.L0:
            if self.k is None or self.epsilon is not None:
                raise InvalidBudgetError("L0 budgets take k, not epsilon")
            if int(self.k) < 1:
                raise InvalidBudgetError(f"k must be >= 1, got {self.k}")
            object.__setattr__(self, "k", int(self.k))
        else:
            if self.epsilon is None or self.k is not None:
                raise InvalidBudgetError(f"{self.norm_family.value} budgets take epsilon, not k")
            if not math.isfinite(self.epsilon) or self.epsilon < 0:
                raise InvalidBudgetError(f"epsilon must be finite and >= 0, got {self.epsilon}")

    def validate_for_shape(self, image_shape: tuple[int, ...]) -> None:
        """Check k against the entry count of the image tensor shape."""
        if self.norm_family is NormFamily.L0:
            numel = math.prod(image_shape)
            if not 1 <= self.k <= numel:
                raise InvalidBudgetError(
                    f"k={self.k} out of range [1, {numel}] for image shape {tuple(image_shape)}"
                )

    @property
    def value(self) -> float:
        return float(self.k if self.norm_family is NormFamily.L0 else self.epsilon)

    def describe(self) -> str:
        if self.norm_family is NormFamily.L0:
            return f"l0:k={self.k}"
        return f"{self.norm_family.value}:eps={self.epsilon:g}"


@dataclass(frozen=True)
class PixelRange:
    low: float = 0.0
    high: float = 1.0

    def __post_init__(self):
        if not self.low < self.high:
            raise InvalidBudgetError(f"pixel range needs low < high, got [{self.low}, {self.high}]")


def _check_image_tensor(delta: torch.Tensor, name: str = "delta") -> bool:
    """Validate shape/finiteness; returns True when the tensor is batched."""
    if delta.dim() == 3:
        batched = False
    elif delta.dim() == 4:
        batched = True
    else:
        raise InvalidInputError(f"{name} must be (C,H,W) or (N,C,H,W), got shape {tuple(delta.shape)}")
    if not torch.isfinite(delta).all():
        raise InvalidInputError(f"{name} contains non-finite entries")
    return batched


def measure_norm(delta: torch.Tensor, norm_family: NormFamily) -> torch.Tensor:
    """Per-image norm over all channels and pixels.

    Returns a scalar tensor for a single image and a length-N vector for a
    batch. L0 counts exactly-nonzero entries.
    """
    batched = _check_image_tensor(delta)
    flat = delta.reshape(delta.shape[0], -1) if batched else delta.reshape(1, -1)
    if norm_family is NormFamily.LINF:
        out = flat.abs().amax(dim=1)
    elif norm_family is NormFamily.L2:
        out = flat.norm(p=2, dim=1)
    elif norm_family is NormFamily.L0:
        out = (flat != 0).sum(dim=1).to(flat.dtype)
    else:
        raise UnsupportedBudgetError(f"unknown norm family {norm_family}")
    return out if batched else out.squeeze(0)


def project_rescale(delta: torch.Tensor, budget: PerturbationBudget) -> torch.Tensor:
    """Scale delta by min(1, eps/||delta||_p), per image.

    Direction-preserving; a zero perturbation is returned unchanged (the
    scale factor min(1, inf) is taken as 1). L0 budgets are not rescalable.
    """
    if budget.norm_family not in (NormFamily.LINF, NormFamily.L2):
        raise UnsupportedBudgetError(
            f"project_rescale supports linf/l2 only, got {budget.norm_family.value}"
        )
    batched = _check_image_tensor(delta)
    norms = measure_norm(delta, budget.norm_family)
    if not batched:
        norms = norms.unsqueeze(0)
    scale = torch.where(
        norms > budget.epsilon,
        budget.epsilon / norms.clamp_min(torch.finfo(delta.dtype).tiny),
        torch.ones_like(norms),
    )
    shape = (-1,) + (1,) * (delta.dim() - 1 if batched else delta.dim())
    scaled = delta * scale.reshape(shape) if batched else delta * scale.reshape(shape).squeeze(0)
    return scaled


def project_l0_topk(delta: torch.Tensor, k: int, group_pixels: bool = False) -> torch.Tensor:
    """Keep the k entries of largest absolute value, zero the rest.

    Ties break toward the lowest flattened index. Retained entries keep their
    exact input values. With group_pixels=True, whole spatial pixels (all C
    channel values) are ranked by their per-pixel L2 magnitude and kept or
    dropped together; k then counts pixels.
    """
    batched = _check_image_tensor(delta)
    work = delta if batched else delta.unsqueeze(0)
    n, c = work.shape[0], work.shape[1]
    if group_pixels:
        keys = work.pow(2).sum(dim=1).reshape(n, -1).sqrt()
    else:
        keys = work.abs().reshape(n, -1)
    numel = keys.shape[1]
    if not 1 <= k <= numel:
        raise InvalidBudgetError(f"k={k} out of range [1, {numel}]")
    # stable sort keeps original order among equal keys -> lowest index wins
    order = torch.argsort(keys, dim=1, descending=True, stable=True)
    mask = torch.zeros_like(keys, dtype=torch.bool)
    mask.scatter_(1, order[:, :k], True)
    if group_pixels:
        mask = mask.reshape(n, 1, *work.shape[2:]).expand(-1, c, -1, -1)
    else:
        mask = mask.reshape(work.shape)
    out = work * mask
    return out if batched else out.squeeze(0)


def apply_budget(delta: torch.Tensor, budget: PerturbationBudget) -> torch.Tensor:
    """Dispatch to the projection matching the budget's norm family."""
    if budget.norm_family is NormFamily.L0:
        return project_l0_topk(delta, budget.k)
    return project_rescale(delta, budget)


def clip_to_valid(x: torch.Tensor, pixel_range: PixelRange = PixelRange()) -> torch.Tensor:
    """Clamp every entry into [low, high]; in-range entries pass through unchanged."""
    _check_image_tensor(x, name="x")
    return x.clamp(pixel_range.low, pixel_range.high)


class TotalVariationTable:
    """Configured lookup between total-variation points and per-family budgets.

    The paper-style "total variation" axis equates budgets across norm
    families. There is no closed-form conversion; the table is seeded with
    the anchor triple TV=160 <-> (Linf=20, L2=25, L0=160) quoted on the 0-255
    pixel scale, and any further points must be configured explicitly (the
    proportional() constructor scales the anchor linearly). Lookups outside
    the table raise; nothing is interpolated silently.
    """

    ANCHOR_TV = 160.0
    ANCHOR = {NormFamily.LINF: 20.0, NormFamily.L2: 25.0, NormFamily.L0: 160.0}

    def __init__(self, entries: dict[float, dict[NormFamily, float]] | None = None,
                 pixel_scale: float = 255.0):
        self.pixel_scale = float(pixel_scale)
        self.entries: dict[float, dict[NormFamily, float]] = {0.0: {f: 0.0 for f in NormFamily}}
        for tv, row in (entries or {self.ANCHOR_TV: dict(self.ANCHOR)}).items():
            self.entries[float(tv)] = {NormFamily(k) if not isinstance(k, NormFamily) else k: float(v)
                                       for k, v in row.items()}

    @classmethod
    def proportional(cls, tv_points, pixel_scale: float = 255.0) -> "TotalVariationTable":
        """Extend the anchor triple linearly through the origin to each tv point."""
        entries = {}
        for tv in tv_points:
            entries[float(tv)] = {
                fam: anchor * (float(tv) / cls.ANCHOR_TV) for fam, anchor in cls.ANCHOR.items()
            }
        return cls(entries, pixel_scale=pixel_scale)

    def budget_for(self, tv: float, family: NormFamily,
                   image_shape: tuple[int, ...] = (3, 32, 32)) -> PerturbationBudget:
        """Family-specific budget at a configured tv point, on the [0,1] scale."""
        row = self.entries.get(float(tv))
        if row is None or family not in row:
            raise UnmappedBudgetError(
                f"no configured budget for tv={tv} family={family.value}; configure the table explicitly"
            )
        raw = row[family]
        if family is NormFamily.L0:
            k = int(round(raw))
            if k == 0:
                raise UnmappedBudgetError("tv=0 maps to an empty L0 budget; use the zero-epsilon families")
            b = PerturbationBudget(family, k=k)
        else:
            b = PerturbationBudget(family, epsilon=raw / self.pixel_scale)
        b.validate_for_shape(image_shape)
        return b

    def tv_for(self, budget: PerturbationBudget, image_shape: tuple[int, ...] = (3, 32, 32),
               rtol: float = 1e-9) -> float:
        """Total-variation label for a budget; zero budgets map to 0."""
        budget.validate_for_shape(image_shape)
        if budget.norm_family is not NormFamily.L0 and budget.epsilon == 0.0:
            return 0.0
        if budget.norm_family is NormFamily.L0:
            quoted = float(budget.k)
        else:
            quoted = budget.epsilon * self.pixel_scale
        for tv, row in self.entries.items():
            ref = row.get(budget.norm_family)
            if ref is not None and math.isclose(quoted, ref, rel_tol=rtol, abs_tol=1e-12):
                return tv
        raise UnmappedBudgetError(
            f"budget {budget.describe()} (quoted {quoted:g} on the 0-{self.pixel_scale:g} scale) "
            f"has no configured total-variation entry"
        )


def total_variation_equivalent(budget: PerturbationBudget,
                               image_shape: tuple[int, ...] = (3, 32, 32),
                               table: TotalVariationTable | None = None) -> float:
    """Map a budget to the total-variation axis via the configured table."""
    return (table or TotalVariationTable()).tv_for(budget, image_shape=image_shape)
