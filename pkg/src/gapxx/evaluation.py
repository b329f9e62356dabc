"""Attack evaluation: adversary-set accuracy tables, per-target success,
norm-family sweeps, and structured report files."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .budget import NormFamily, PerturbationBudget, TotalVariationTable, measure_norm
from .errors import ConfigurationError, InvalidInputError
from .victims import evaluate_accuracy


@dataclass
class AttackReport:
    """Structured record of one evaluation run.

    aa_percent maps budget value -> accuracy on the adversary set;
    fooling_percent is its 100-complement at the same budget. fooling_rate
    mirrors the entry at the largest evaluated budget. per_target_success
    maps target -> success percentages under both denominators (the
    exclusion variant, which drops examples whose true label equals the
    target, is primary).
    """

    victim_id: str
    attacker_id: str
    method: str
    av_percent: float
    aa_percent: dict = field(default_factory=dict)
    fooling_percent: dict = field(default_factory=dict)
    fooling_rate: float = 0.0
    per_target_success: dict = field(default_factory=dict)
    norm_stats: dict = field(default_factory=dict)
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def validate(self) -> "AttackReport":
        rates = list(self.aa_percent.values()) + [self.av_percent, self.fooling_rate]
        for t in self.per_target_success.values():
            rates += list(t.values())
        if any(not (0.0 <= r <= 100.0) for r in rates):
            raise InvalidInputError("report rates must lie in [0, 100]")
        for b, aa in self.aa_percent.items():
            fool = self.fooling_percent.get(b)
            if fool is None or abs((100.0 - aa) - fool) > 1e-9:
                raise InvalidInputError("fooling_percent inconsistent with aa_percent")
        return self


def _batched(n, batch_size):
    for i in range(0, n, batch_size):
        yield slice(i, min(i + batch_size, n))


def evaluate_nontargeted(victim, attack_fn, data, budgets: list[PerturbationBudget],
                         batch_size: int = 256, victim_id: str = "", attacker_id: str = "",
                         method: str = "", seed: int = 0) -> AttackReport:
    """AA% per budget over a validation split.

    attack_fn(x, labels, budget) -> adversarial x. AA% counts adversaries
    still classified as their true label, over all examples including those
    misclassified to begin with; at a zero budget it therefore equals AV%
    exactly.
    """
    if not budgets:
        raise ConfigurationError("empty budget list")
    images, labels = data.images(), data.labels
    av = evaluate_accuracy(victim, images, labels, batch_size)
    report = AttackReport(victim_id=victim_id, attacker_id=attacker_id, method=method,
                          av_percent=av, seed=seed)
    for budget in sorted(budgets, key=lambda b: b.value):
        correct = 0
        pre_max = post_max = 0.0
        post_sum = 0.0
        for sl in _batched(images.shape[0], batch_size):
            x, y = images[sl], labels[sl]
            x_adv = attack_fn(x, y, budget)
            if isinstance(x_adv, tuple):
                x_adv = x_adv[0]
            pred = victim.predict(x_adv).predicted_class
            correct += (pred == y).sum().item()
            norms = measure_norm(x_adv - x, budget.norm_family)
            post_sum += float(norms.sum())
            post_max = max(post_max, float(norms.max()) if norms.numel() else 0.0)
        aa = 100.0 * correct / images.shape[0]
        report.aa_percent[budget.value] = aa
        report.fooling_percent[budget.value] = 100.0 - aa
        report.norm_stats[budget.describe()] = {
            "postclip_mean": post_sum / images.shape[0],
            "postclip_max": post_max,
        }
    report.fooling_rate = report.fooling_percent[max(report.fooling_percent)]
    return report.validate()


def evaluate_targeted(victim, attacker_fn, data, budget: PerturbationBudget,
                      targets: list[int], batch_size: int = 256, victim_id: str = "",
                      attacker_id: str = "", method: str = "", seed: int = 0) -> AttackReport:
    """Per-target success plus AA% averaged over the targeted adversary sets.

    attacker_fn(x, labels, budget, target) -> adversarial x. Success for
    target t is the share of adversaries classified as t; the primary
    denominator excludes examples whose true label is already t.
    """
    for t in targets:
        if not 0 <= int(t) < victim.num_classes:
            raise InvalidInputError(f"target {t} out of range [0, {victim.num_classes})")
    images, labels = data.images(), data.labels
    av = evaluate_accuracy(victim, images, labels, batch_size)
    report = AttackReport(victim_id=victim_id, attacker_id=attacker_id, method=method,
                          av_percent=av, seed=seed)
    accuracy_sum = 0.0
    for t in targets:
        t = int(t)
        hits_excl = n_excl = hits_incl = correct = 0
        for sl in _batched(images.shape[0], batch_size):
            x, y = images[sl], labels[sl]
            x_adv = attacker_fn(x, y, budget, t)
            if isinstance(x_adv, tuple):
                x_adv = x_adv[0]
            pred = victim.predict(x_adv).predicted_class
            correct += (pred == y).sum().item()
            hit = pred == t
            hits_incl += hit.sum().item()
            eligible = y != t
            hits_excl += (hit & eligible).sum().item()
            n_excl += eligible.sum().item()
        report.per_target_success[t] = {
            "success_percent": 100.0 * hits_excl / max(1, n_excl),
            "success_percent_inclusive": 100.0 * hits_incl / images.shape[0],
        }
        accuracy_sum += 100.0 * correct / images.shape[0]
    aa = accuracy_sum / len(targets)
    report.aa_percent[budget.value] = aa
    report.fooling_percent[budget.value] = 100.0 - aa
    report.fooling_rate = 100.0 - aa
    report.extra["targets"] = [int(t) for t in targets]
    return report.validate()


def evaluate_adversary_set(victim, attack_fn, data, budget: PerturbationBudget,
                           targets: list[int], batch_size: int = 256, victim_id: str = "",
                           attacker_id: str = "", method: str = "", seed: int = 0) -> AttackReport:
    """Per-target success measured on a single fixed adversary set.

    For attackers that cannot vary their target (the single-target baseline),
    one adversary per example is generated via attack_fn(x, labels, budget)
    and every requested target's success is read off that same set.
    """
    images, labels = data.images(), data.labels
    av = evaluate_accuracy(victim, images, labels, batch_size)
    report = AttackReport(victim_id=victim_id, attacker_id=attacker_id, method=method,
                          av_percent=av, seed=seed)
    counts = {int(t): [0, 0, 0] for t in targets}  # hits_excl, n_excl, hits_incl
    correct = 0
    for sl in _batched(images.shape[0], batch_size):
        x, y = images[sl], labels[sl]
        x_adv = attack_fn(x, y, budget)
        if isinstance(x_adv, tuple):
            x_adv = x_adv[0]
        pred = victim.predict(x_adv).predicted_class
        correct += (pred == y).sum().item()
        for t, acc in counts.items():
            hit = pred == t
            eligible = y != t
            acc[0] += (hit & eligible).sum().item()
            acc[1] += eligible.sum().item()
            acc[2] += hit.sum().item()
    for t, (hits_excl, n_excl, hits_incl) in counts.items():
        report.per_target_success[t] = {
            "success_percent": 100.0 * hits_excl / max(1, n_excl),
            "success_percent_inclusive": 100.0 * hits_incl / images.shape[0],
        }
    aa = 100.0 * correct / images.shape[0]
    report.aa_percent[budget.value] = aa
    report.fooling_percent[budget.value] = 100.0 - aa
    report.fooling_rate = 100.0 - aa
    report.extra["targets"] = [int(t) for t in targets]
    report.extra["fixed_adversary_set"] = True
    return report.validate()


def norm_sweep(victim, attacker_per_family: dict, data, tv_points: list[float],
               table: TotalVariationTable | None = None, targets: list[int] | None = None,
               batch_size: int = 256, image_shape=(3, 32, 32)) -> list[dict]:
    """Adversary accuracy and targeted success per (tv point, norm family).

    One trained attacker per family, all against the same victim. Budgets
    come from the configured total-variation table; a zero tv point means an
    identically zero perturbation for every family.
    """
    from .attacks import AttackMode, AttackRequest, gapxx_attack

    table = table or TotalVariationTable.proportional(tv_points)
    targets = targets if targets is not None else list(range(victim.num_classes))
    images, labels = data.images(), data.labels
    rows = []
    for tv in tv_points:
        for family, generator in attacker_per_family.items():
            family = NormFamily(family) if not isinstance(family, NormFamily) else family
            if float(tv) == 0.0:
                budget = None
                budget_value = 0.0
            else:
                budget = table.budget_for(float(tv), family, image_shape)
                budget_value = budget.value

            def attack(x, _y, _b, target=None):
                if budget is None:
                    return x
                mode = AttackMode.UNTARGETED if target is None else AttackMode.TARGETED
                req = AttackRequest(mode=mode, budget=budget, target=target)
                return gapxx_attack(generator, victim, x, req)[0]

            correct = 0
            for sl in _batched(images.shape[0], batch_size):
                pred = victim.predict(attack(images[sl], None, None)).predicted_class
                correct += (pred == labels[sl]).sum().item()
            adversary_accuracy = 100.0 * correct / images.shape[0]

            success_sum = 0.0
            for t in targets:
                hits = eligible = 0
                for sl in _batched(images.shape[0], batch_size):
                    x, y = images[sl], labels[sl]
                    pred = victim.predict(attack(x, None, None, target=int(t))).predicted_class
                    mask = y != int(t)
                    hits += ((pred == int(t)) & mask).sum().item()
                    eligible += mask.sum().item()
                success_sum += 100.0 * hits / max(1, eligible)

            rows.append({
                "tv": float(tv),
                "family": family.value,
                "budget_value": budget_value,
                "adversary_accuracy_percent": adversary_accuracy,
                "targeted_success_percent": success_sum / max(1, len(targets)),
            })
    return rows


def report_to_dict(report: AttackReport) -> dict:
    return {
        "victim_id": report.victim_id,
        "attacker_id": report.attacker_id,
        "method": report.method,
        "av_percent": report.av_percent,
        "aa_percent": [[b, v] for b, v in sorted(report.aa_percent.items())],
        "fooling_percent": [[b, v] for b, v in sorted(report.fooling_percent.items())],
        "fooling_rate": report.fooling_rate,
        "per_target_success": {str(t): v for t, v in report.per_target_success.items()},
        "norm_stats": report.norm_stats,
        "seed": report.seed,
        "extra": report.extra,
    }


def report_from_dict(payload: dict) -> AttackReport:
    return AttackReport(
        victim_id=payload["victim_id"],
        attacker_id=payload["attacker_id"],
        method=payload["method"],
        av_percent=payload["av_percent"],
        aa_percent={float(b): v for b, v in payload["aa_percent"]},
        fooling_percent={float(b): v for b, v in payload["fooling_percent"]},
        fooling_rate=payload["fooling_rate"],
        per_target_success={int(t): v for t, v in payload["per_target_success"].items()},
        norm_stats=payload["norm_stats"],
        seed=payload["seed"],
        extra=payload.get("extra", {}),
    ).validate()


def emit_report(report: AttackReport, path) -> Path:
    """JSON report plus a flat CSV mirror (one row per budget)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report_to_dict(report), indent=2) + "\n")
    with path.with_suffix(".csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["victim", "method", "attacker", "budget", "av_percent",
                         "aa_percent", "fooling_percent"])
        for b in sorted(report.aa_percent):
            writer.writerow([report.victim_id, report.method, report.attacker_id, b,
                             report.av_percent, report.aa_percent[b],
                             report.fooling_percent[b]])
    return path


def load_report(path) -> AttackReport:
    return report_from_dict(json.loads(Path(path).read_text()))


def save_sweep_table(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rows, indent=2) + "\n")
    return path


def load_sweep_table(path) -> list[dict]:
    return json.loads(Path(path).read_text())
