"""Attacker training loops: the conditional GAP++ objective and the
single-target GAP baseline, with metrics streaming and checkpointing.

Each GAP++ step computes the targeted term on freshly sampled one-hot
conditions and the least-likely untargeted term on zero conditions for the
same batch, then follows their alpha-weighted sum. Only generator
parameters ever change; the victim checksum is verified across the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch

from .attacks import PerturbationPipeline
from .budget import PerturbationBudget
from .errors import (
    ImpossibleAttackError,
    InvalidInputError,
    InvariantViolationError,
    TrainingFailureError,
)
from .generator import PerturbationGenerator, encode_condition_batch, save_generator
from .losses import combined_loss, cross_entropy, fooling_loss_diagnostic
from .manifest import MetricsLog, seed_everything


@dataclass
class TrainConfig:
    budget: PerturbationBudget
    victim_id: str = ""
    alpha: float = 1.0
    learning_rate: float = 2e-4
    batch_size: int = 128
    max_epochs: int = 20
    seed: int = 0
    max_steps: int | None = None  # desk-scale cap; None trains full epochs
    val_examples: int = 2048  # per-epoch validation subset for fooling metrics

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


def sample_targets(clean_predictions: torch.Tensor, num_classes: int,
                   rng: torch.Generator) -> torch.Tensor:
    """Uniform draw from the num_classes - 1 labels excluding each clean
    prediction; an unbiased one-sample estimator of the full target sum."""
    if num_classes < 2:
        raise ImpossibleAttackError("cannot sample attack targets with fewer than 2 classes")
    clean_predictions = torch.as_tensor(clean_predictions, dtype=torch.long)
    draw = torch.randint(0, num_classes - 1, clean_predictions.shape, generator=rng)
    return draw + (draw >= clean_predictions).long()


@torch.no_grad()
def untargeted_fooling_rate(generator, victim, images: torch.Tensor, labels: torch.Tensor,
                            budget: PerturbationBudget, batch_size: int = 256) -> float:
    """Percent of zero-condition adversaries no longer classified as their
    true label."""
    pipeline = PerturbationPipeline(generator, budget)
    was_training = generator.training
    generator.eval()
    fooled = 0
    for i in range(0, images.shape[0], batch_size):
        x = images[i:i + batch_size]
        cond = encode_condition_batch(None, generator.condition_dim, batch_size=x.shape[0]) \
            if generator.condition_dim else None
        x_adv = pipeline(x, cond)
        pred = victim.predict(x_adv).predicted_class
        fooled += (pred != labels[i:i + batch_size]).sum().item()
    generator.train(was_training)
    return 100.0 * fooled / max(1, images.shape[0])


class _AttackerTrainer:
    """Shared loop machinery for both attacker flavors."""

    def __init__(self, config: TrainConfig, train_data, victim, generator, run_dir=None):
        self.config = config
        self.data = train_data
        self.victim = victim.freeze()
        self.generator = generator
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.metrics = MetricsLog(self.run_dir)
        self.pipeline = PerturbationPipeline(generator, config.budget)
        self.rng = seed_everything(config.seed)
        self.victim_checksum = victim.parameter_checksum()
        self.best_fooling = -1.0
        self.step = 0

    def _abort(self, last_good, reason: str):
        ckpt = None
        self.generator.load_state_dict(last_good)
        if self.run_dir is not None:
            ckpt = self.run_dir / "checkpoint_last_good.pt"
            save_generator(self.generator, ckpt)
        raise TrainingFailureError(
            f"attacker training diverged at step {self.step}: {reason}",
            last_good_checkpoint=ckpt if ckpt is not None else last_good,
        )

    def _check_victim_frozen(self):
        if self.victim.parameter_checksum() != self.victim_checksum:
            raise InvariantViolationError(
                "victim parameters drifted during attacker training"
            )

    def _epoch_end(self, epoch, val_images, val_labels):
        self._check_victim_frozen()
        fooling = untargeted_fooling_rate(
            self.generator, self.victim, val_images, val_labels, self.config.budget
        )
        diag = fooling_loss_diagnostic(
            self.victim, self.pipeline, val_images[: min(512, val_images.shape[0])]
        ) if self.generator.condition_dim else None
        self.metrics.log(kind="epoch", epoch=epoch, val_fooling_percent=fooling,
                         fooling_loss_diagnostic=diag)
        if fooling > self.best_fooling:
            self.best_fooling = fooling
            if self.run_dir is not None:
                save_generator(self.generator, self.run_dir / "checkpoint_best.pt")
        return fooling

    def run(self, step_fn, val_images, val_labels):
        cfg = self.config
        n = len(self.data)
        last_good = {k: v.clone() for k, v in self.generator.state_dict().items()}
        opt = torch.optim.Adam(self.generator.parameters(), lr=cfg.learning_rate)
        self.generator.train()
        done = False
        for epoch in range(cfg.max_epochs):
            perm = torch.randperm(n, generator=self.rng)
            for i in range(0, n, cfg.batch_size):
                idx = perm[i:i + cfg.batch_size]
                x = self.data.images(idx)
                opt.zero_grad()
                try:
                    breakdown, loss = step_fn(x)
                except InvalidInputError as e:
                    # non-finite activations trip the budget guards first
                    self._abort(last_good, str(e))
                if not torch.isfinite(loss):
                    self._abort(last_good, "non-finite loss")
                loss.backward()
                opt.step()
                self.step += 1
                self.metrics.log(kind="step", step=self.step, epoch=epoch,
                                 targeted=breakdown.targeted_term,
                                 untargeted=breakdown.untargeted_term,
                                 alpha=breakdown.alpha, total=breakdown.total)
                if self.step % 50 == 0:
                    last_good = {k: v.clone() for k, v in self.generator.state_dict().items()}
                if cfg.max_steps is not None and self.step >= cfg.max_steps:
                    done = True
                    break
            self._epoch_end(epoch, val_images, val_labels)
            if done:
                break
        self.generator.freeze()
        self._check_victim_frozen()
        if self.run_dir is not None:
            save_generator(self.generator, self.run_dir / "checkpoint_last.pt")
        return self.generator, self.metrics


def train_gapxx(config: TrainConfig, train_data, victim, generator: PerturbationGenerator,
                val_data=None, run_dir=None):
    """Train the conditional attacker on the combined objective.

    Returns (generator, metrics). The best-by-validation-fooling checkpoint
    and the final state are written under run_dir when given.
    """
    if generator.condition_dim != victim.num_classes:
        raise InvariantViolationError(
            f"generator condition_dim={generator.condition_dim} must equal "
            f"victim class count {victim.num_classes}"
        )
    trainer = _AttackerTrainer(config, train_data, victim, generator, run_dir)
    C = victim.num_classes

    def step_fn(x):
        clean = victim.predict(x)
        targets = sample_targets(clean.predicted_class, C, trainer.rng)
        cond = encode_condition_batch(targets, C)
        t_loss = cross_entropy(victim(trainer.pipeline(x, cond)), targets)
        ll = victim.least_likely_class(x)
        zero = encode_condition_batch(None, C, batch_size=x.shape[0])
        u_loss = cross_entropy(victim(trainer.pipeline(x, zero)), ll)
        total = t_loss + config.alpha * u_loss
        return combined_loss(t_loss.item(), u_loss.item(), config.alpha), total

    val = val_data if val_data is not None else train_data
    take = min(config.val_examples, len(val))
    val_images, val_labels = val.images(slice(0, take)), val.labels[:take]
    generator.metadata.update(
        role="gapxx", condition_dim=C, norm_family=config.budget.norm_family.value,
        budget=config.budget.describe(), victim_id=config.victim_id,
        alpha=config.alpha, seed=config.seed,
        victim_checksum=trainer.victim_checksum,
    )
    return trainer.run(step_fn, val_images, val_labels)


def train_gap_single(config: TrainConfig, train_data, victim,
                     generator: PerturbationGenerator, fixed_target: int,
                     val_data=None, run_dir=None):
    """Train the unconditioned single-target baseline (no untargeted term;
    alpha is forced to 0 in the metrics stream).

    Examples the victim already predicts as the fixed target are masked out
    of the batch loss; there is nothing to push for them.
    """
    if generator.condition_dim != 0:
        raise InvariantViolationError("single-target baseline expects condition_dim=0")
    if not 0 <= fixed_target < victim.num_classes:
        raise ImpossibleAttackError(f"fixed target {fixed_target} out of range")
    trainer = _AttackerTrainer(config, train_data, victim, generator, run_dir)

    def step_fn(x):
        clean = victim.predict(x)
        keep = clean.predicted_class != fixed_target
        x_kept = x[keep] if int(keep.sum()) else x
        targets = torch.full((x_kept.shape[0],), fixed_target, dtype=torch.long)
        t_loss = cross_entropy(victim(trainer.pipeline(x_kept, None)), targets)
        return combined_loss(t_loss.item(), 0.0, 0.0), t_loss

    val = val_data if val_data is not None else train_data
    take = min(config.val_examples, len(val))
    val_images, val_labels = val.images(slice(0, take)), val.labels[:take]
    generator.metadata.update(
        role="gap-single", condition_dim=0, fixed_target=int(fixed_target),
        norm_family=config.budget.norm_family.value, budget=config.budget.describe(),
        victim_id=config.victim_id, alpha=0.0, seed=config.seed,
        victim_checksum=trainer.victim_checksum,
    )
    return trainer.run(step_fn, val_images, val_labels)
