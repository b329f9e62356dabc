"""Inference-time attacks: FGSM, the conditional GAP++ pipeline, and the
single-target GAP baseline. All attacks are read-only over frozen models."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .budget import (
    NormFamily,
    PerturbationBudget,
    PixelRange,
    apply_budget,
    clip_to_valid,
    measure_norm,
)
from .errors import (
    IncompatibilityError,
    UsageError,
    UnsupportedBudgetError,
    WrongTargetError,
)
from .generator import encode_condition_batch


class AttackMode(enum.Enum):
    UNTARGETED = "untargeted"
    TARGETED = "targeted"


@dataclass(frozen=True)
class AttackRequest:
    mode: AttackMode
    budget: PerturbationBudget
    target: int | None = None
    victim_id: str | None = None
    attacker_id: str | None = None

    def __post_init__(self):
        if self.mode is AttackMode.TARGETED and self.target is None:
            raise UsageError("targeted attacks need a target class")
        if self.mode is AttackMode.UNTARGETED and self.target is not None:
            raise UsageError("untargeted attacks take no target class")


class PerturbationPipeline:
    """forward -> project -> add -> clip, differentiable into the generator."""

    def __init__(self, generator, budget: PerturbationBudget,
                 pixel_range: PixelRange = PixelRange()):
        self.generator = generator
        self.budget = budget
        self.pixel_range = pixel_range

    def raw_delta(self, x: torch.Tensor, cond: torch.Tensor | None) -> torch.Tensor:
        if self.generator.condition_dim == 0:
            return self.generator(x)
        return self.generator(x, cond)

    def projected_delta(self, x: torch.Tensor, cond: torch.Tensor | None) -> torch.Tensor:
        return apply_budget(self.raw_delta(x, cond), self.budget)

    def __call__(self, x: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        return clip_to_valid(x + self.projected_delta(x, cond), self.pixel_range)


@dataclass
class NormStats:
    """Measured perturbation norms, before and after valid-range clipping."""

    family: NormFamily
    budget_value: float
    preclip: torch.Tensor
    postclip: torch.Tensor

    def summary(self) -> dict:
        def stats(t):
            if t.numel() == 0:
                return {"mean": 0.0, "max": 0.0}
            return {"mean": float(t.mean()), "max": float(t.max())}

        return {
            "family": self.family.value,
            "budget": self.budget_value,
            "preclip": stats(self.preclip),
            "postclip": stats(self.postclip),
        }


def fgsm(victim, x: torch.Tensor, labels: torch.Tensor, request: AttackRequest) -> torch.Tensor:
    """Single-step sign-of-gradient attack under an L-inf budget.

    Untargeted ascends the true-label loss; targeted descends the target
    loss. Exactly one victim gradient evaluation per batch; sign(0) is 0.
    """
    if request.budget.norm_family is not NormFamily.LINF:
        raise UnsupportedBudgetError("fgsm is an L-inf method; use an linf budget")
    eps = request.budget.epsilon
    x = x.clone().detach().requires_grad_(True)
    logits = victim(x)
    if request.mode is AttackMode.TARGETED:
        target = torch.full_like(labels, int(request.target))
        loss = F.cross_entropy(logits, target)
        step = -eps
    else:
        loss = F.cross_entropy(logits, labels)
        step = eps
    grad = torch.autograd.grad(loss, x)[0]
    x_adv = clip_to_valid(x.detach() + step * grad.sign())
    return x_adv


def _check_compat(generator, victim):
    if generator.condition_dim and generator.condition_dim != victim.num_classes:
        raise IncompatibilityError(
            f"generator condition_dim={generator.condition_dim} does not match "
            f"victim class count {victim.num_classes}"
        )


def _run_pipeline(generator, victim, x, cond, budget):
    pipeline = PerturbationPipeline(generator, budget)
    with torch.no_grad():
        delta = pipeline.projected_delta(x, cond)
        x_adv = clip_to_valid(x + delta)
    stats = NormStats(
        family=budget.norm_family,
        budget_value=budget.value,
        preclip=measure_norm(delta, budget.norm_family),
        postclip=measure_norm(x_adv - x, budget.norm_family),
    )
    return x_adv, stats


def gapxx_attack(generator, victim, x: torch.Tensor,
                 request: AttackRequest) -> tuple[torch.Tensor, NormStats]:
    """Conditional attack: one checkpoint serves every one-hot target and the
    zero-vector untargeted mode."""
    _check_compat(generator, victim)
    request.budget.validate_for_shape(tuple(x.shape[1:]))
    if request.mode is AttackMode.TARGETED:
        cond = encode_condition_batch(
            torch.full((x.shape[0],), int(request.target), dtype=torch.long),
            generator.condition_dim,
        )
    else:
        cond = encode_condition_batch(None, generator.condition_dim, batch_size=x.shape[0])
    return _run_pipeline(generator, victim, x, cond, request.budget)


def gap_single_target_attack(generator, victim, x: torch.Tensor, budget: PerturbationBudget,
                             target: int | None = None) -> tuple[torch.Tensor, NormStats]:
    """Unconditioned single-target baseline; refuses targets it was not
    trained for."""
    trained_for = generator.metadata.get("fixed_target")
    if trained_for is None:
        raise UsageError("generator carries no fixed_target metadata; not a single-target model")
    if target is not None and int(target) != int(trained_for):
        raise WrongTargetError(
            f"this model was trained for target {trained_for}, not {target}"
        )
    if generator.condition_dim != 0:
        raise IncompatibilityError("single-target baseline expects an unconditioned generator")
    budget.validate_for_shape(tuple(x.shape[1:]))
    return _run_pipeline(generator, victim, x, cond=None, budget=budget)


def save_adversary_archive(path, x_adv: torch.Tensor, x_clean: torch.Tensor,
                           labels: torch.Tensor, record: dict) -> None:
    """Adversarial batch as an .npz image archive plus a JSON manifest record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        path,
        adversarial=x_adv.detach().cpu().numpy().astype(np.float32),
        clean=x_clean.detach().cpu().numpy().astype(np.float32),
        labels=labels.detach().cpu().numpy().astype(np.int64),
    )
    path.with_suffix(".json").write_text(json.dumps(record, indent=2, default=str) + "\n")


def load_adversary_archive(path) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, dict]:
    path = Path(path)
    with np.load(path) as z:
        x_adv = torch.from_numpy(z["adversarial"])
        x_clean = torch.from_numpy(z["clean"])
        labels = torch.from_numpy(z["labels"])
    record = json.loads(path.with_suffix(".json").read_text())
    return x_adv, x_clean, labels, record
