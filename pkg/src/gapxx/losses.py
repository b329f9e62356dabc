"""Training objectives: targeted cross-entropy, least-likely untargeted,
their weighted combination, and the fooling-loss diagnostic.

Batch reduction is the mean throughout, which keeps the learning rate
decoupled from batch size. A `pipeline` argument is any callable
(x, conditions) -> adversarial x implementing forward -> project -> add ->
clip end to end, differentiable into the generator parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InvalidInputError, SamplerContractError
from .generator import encode_condition_batch


@dataclass(frozen=True)
class LossBreakdown:
    targeted_term: float
    untargeted_term: float
    alpha: float
    total: float

    @classmethod
    def combine(cls, targeted: float, untargeted: float, alpha: float) -> "LossBreakdown":
        return cls(targeted, untargeted, alpha, targeted + alpha * untargeted)


def cross_entropy(logits: torch.Tensor, target) -> torch.Tensor:
    """-log softmax(logits)[target]; accepts a single logits vector or a batch.

    Batched calls return the mean over examples.
    """
    if not torch.is_tensor(logits):
        logits = torch.as_tensor(logits, dtype=torch.float32)
    if not torch.isfinite(logits).all():
        raise InvalidInputError("cross_entropy got non-finite logits")
    if logits.dim() == 1:
        t = int(target)
        if not 0 <= t < logits.shape[0]:
            raise InvalidInputError(f"target {t} out of range [0, {logits.shape[0]})")
        return -F.log_softmax(logits, dim=0)[t]
    target = torch.as_tensor(target, dtype=torch.long)
    if target.numel() and (target.min() < 0 or target.max() >= logits.shape[1]):
        raise InvalidInputError(f"target out of range [0, {logits.shape[1]})")
    return F.cross_entropy(logits, target)


def targeted_loss(victim, pipeline, x: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy between adversarial predictions and sampled targets.

    The target sampler must already have excluded the victim's clean
    prediction for every example; a violation raises rather than training on
    a degenerate objective.
    """
    targets = torch.as_tensor(targets, dtype=torch.long)
    clean_pred = victim.predict(x).predicted_class
    clash = targets.eq(clean_pred)
    if bool(clash.any()):
        idx = int(clash.nonzero()[0])
        raise SamplerContractError(
            f"sampled target equals the clean prediction ({int(targets[idx])}) at batch index {idx}"
        )
    cond = encode_condition_batch(targets, victim.num_classes)
    x_adv = pipeline(x, cond)
    return cross_entropy(victim(x_adv), targets)


def untargeted_least_likely_loss(victim, pipeline, x: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy between adversarial predictions and the least-likely
    clean class, under all-zero conditioning."""
    ll = victim.least_likely_class(x)
    cond = torch.zeros(x.shape[0], victim.num_classes)
    x_adv = pipeline(x, cond)
    return cross_entropy(victim(x_adv), ll)


def combined_loss(targeted: float, untargeted: float, alpha: float = 1.0) -> LossBreakdown:
    """total = targeted + alpha * untargeted, recorded term by term."""
    return LossBreakdown.combine(float(targeted), float(untargeted), float(alpha))


def fooling_loss_diagnostic(victim, pipeline, x: torch.Tensor) -> float:
    """Negated cross-entropy between the adversarial prediction and the clean
    predicted class. More negative means more fooling. Reported as a metric
    only; it is a maximization objective and is never added to the combined
    training loss."""
    clean_pred = victim.predict(x).predicted_class
    cond = torch.zeros(x.shape[0], victim.num_classes)
    with torch.no_grad():
        x_adv = pipeline(x, cond)
        value = cross_entropy(victim(x_adv), clean_pred)
    return -float(value)
