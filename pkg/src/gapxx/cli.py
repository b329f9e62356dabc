"""Single entry point: `gapxx <subcommand>` orchestrates every workflow.

Configuration precedence is CLI flags > --config YAML file > built-in
defaults; the resolved configuration is snapshotted into the artifact
directory's manifest. Exit codes: 0 success, 2 usage, 3 data, 4 training
failure, 5 invariant violation, 6 output collision.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from . import attacks as attacks_mod
from . import evaluation as eval_mod
from . import viz as viz_mod
from .attacks import AttackMode, AttackRequest, fgsm, gap_single_target_attack, gapxx_attack
from .budget import NormFamily, PerturbationBudget, TotalVariationTable
from .data import DatasetName, Split, ingest_dataset
from .errors import GapxxError, UsageError
from .generator import GeneratorConfig, PerturbationGenerator, load_generator
from .manifest import Manifest, prepare_out_dir, seed_everything
from .training import TrainConfig, train_gap_single, train_gapxx
from .victims import VictimArch, VictimSpec, build_victim, load_victim, save_victim, train_victim


def _load_config_file(path):
    import yaml

    try:
        payload = yaml.safe_load(Path(path).read_text()) or {}
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except yaml.YAMLError as e:
        raise UsageError(f"malformed config file {path}: {e}")
    if not isinstance(payload, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    return {k.replace("-", "_"): v for k, v in payload.items()}


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit CLI flags."""
    cli = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    resolved = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = _load_config_file(args.config)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise UsageError(f"config file keys not recognized for this subcommand: {sorted(unknown)}")
        resolved.update(file_cfg)
    resolved.update(cli)  # argparse.SUPPRESS keeps unspecified flags out
    return resolved


def _parse_budget(cfg) -> PerturbationBudget:
    family = NormFamily.parse(cfg["norm"])
    eps, k = cfg.get("epsilon"), cfg.get("k")
    if family is NormFamily.L0:
        if eps is not None:
            raise UsageError("--epsilon does not apply to --norm l0; use --k")
        if k is None:
            raise UsageError("--norm l0 needs --k")
        return PerturbationBudget(family, k=int(k))
    if k is not None:
        raise UsageError(f"--k does not apply to --norm {family.value}; use --epsilon")
    if eps is None:
        raise UsageError(f"--norm {family.value} needs --epsilon")
    eps = float(eps)
    if cfg.get("pixel_scale_255"):
        eps /= 255.0
    return PerturbationBudget(family, epsilon=eps)


def _victim_ckpt_path(ref) -> Path:
    p = Path(ref)
    return p / "checkpoint.pt" if p.is_dir() else p


def _attacker_ckpt_path(ref) -> Path:
    p = Path(ref)
    if p.is_dir():
        best = p / "checkpoint_best.pt"
        return best if best.exists() else p / "checkpoint_last.pt"
    return p


def _victim_id(victim) -> str:
    return f"{victim.spec.dataset}_{victim.spec.architecture.value}_{victim.parameter_checksum()[:8]}"


def _budget_list(cfg, family: NormFamily) -> list[PerturbationBudget]:
    values = [float(v) for v in str(cfg["budgets"]).split(",") if v != ""]
    if not values:
        raise UsageError("--budgets must name at least one value")
    out = []
    for v in values:
        if family is NormFamily.L0:
            out.append(PerturbationBudget(family, k=int(v)))
        else:
            out.append(PerturbationBudget(family, epsilon=v / 255.0 if cfg.get("pixel_scale_255") else v))
    return out


def _int_list(raw) -> list[int]:
    return [int(v) for v in str(raw).split(",") if v != ""]


# ---------------------------------------------------------------- train-victim

TRAIN_VICTIM_DEFAULTS = dict(
    dataset=None, arch=None, seed=0, out=None, epochs=10, batch_size=128, lr=0.05,
    weight_decay=5e-4, target_av=None, target_tolerance=1.0, cache_dir=None, force=False,
)


def cmd_train_victim(args):
    cfg = _resolve(args, TRAIN_VICTIM_DEFAULTS)
    for required in ("dataset", "arch", "out"):
        if not cfg.get(required):
            raise UsageError(f"--{required.replace('_', '-')} is required")
    spec = VictimSpec(VictimArch.parse(cfg["arch"]), cfg["dataset"])
    out = prepare_out_dir(cfg["out"], cfg["force"])
    train = ingest_dataset(spec.dataset, Split.TRAIN, cfg["cache_dir"])
    val = ingest_dataset(spec.dataset, Split.VALIDATION, cfg["cache_dir"])
    manifest = Manifest(out)
    manifest.append_run_start(
        "train-victim", cfg, cfg["seed"],
        dataset_checksums={"train": train.checksum, "validation": val.checksum},
    )
    seed_everything(cfg["seed"])
    victim = build_victim(spec)

    def log_fn(**fields):
        print(json.dumps({"subcommand": "train-victim", **fields}), flush=True)

    victim, av = train_victim(
        victim, train.images(), train.labels, val.images(), val.labels,
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
        weight_decay=cfg["weight_decay"], seed=cfg["seed"],
        target_av=cfg["target_av"], target_tolerance=cfg["target_tolerance"], log_fn=log_fn,
    )
    ckpt = out / "checkpoint.pt"
    save_victim(victim, ckpt)
    manifest.append("run-complete", av_percent=av, checkpoint=str(ckpt),
                    parameter_checksum=victim.parameter_checksum())
    print(f"AV% = {av:.2f}  ({spec.dataset}/{spec.architecture.value}) -> {ckpt}")
    return 0


# -------------------------------------------------------------- train-attacker

TRAIN_ATTACKER_DEFAULTS = dict(
    victim=None, norm="linf", epsilon=None, k=None, alpha=1.0, mode="gapxx", target=None,
    seed=0, out=None, learning_rate=2e-4, batch_size=128, max_epochs=20, max_steps=None,
    train_subset=None, val_examples=2048, pixel_scale_255=False, cache_dir=None, force=False,
)


def cmd_train_attacker(args):
    cfg = _resolve(args, TRAIN_ATTACKER_DEFAULTS)
    for required in ("victim", "out"):
        if not cfg.get(required):
            raise UsageError(f"--{required} is required")
    if cfg["mode"] == "gap-single" and cfg.get("target") is None:
        raise UsageError("--mode gap-single needs --target")
    if cfg["mode"] == "gapxx" and cfg.get("target") is not None:
        raise UsageError("--target only applies to --mode gap-single")
    budget = _parse_budget(cfg)
    victim = load_victim(_victim_ckpt_path(cfg["victim"]))
    out = prepare_out_dir(cfg["out"], cfg["force"])
    train = ingest_dataset(victim.spec.dataset, Split.TRAIN, cfg["cache_dir"])
    val = ingest_dataset(victim.spec.dataset, Split.VALIDATION, cfg["cache_dir"])
    if cfg["train_subset"]:
        train = train.subset(slice(0, int(cfg["train_subset"])))
    manifest = Manifest(out)
    manifest.append_run_start(
        "train-attacker", {**cfg, "budget": budget.describe()}, cfg["seed"],
        dataset_checksums={"train": train.checksum, "validation": val.checksum},
        victim_id=_victim_id(victim), victim_checksum_before=victim.parameter_checksum(),
    )
    train_cfg = TrainConfig(
        budget=budget, victim_id=_victim_id(victim), alpha=float(cfg["alpha"]),
        learning_rate=float(cfg["learning_rate"]), batch_size=int(cfg["batch_size"]),
        max_epochs=int(cfg["max_epochs"]),
        max_steps=int(cfg["max_steps"]) if cfg["max_steps"] else None,
        seed=int(cfg["seed"]), val_examples=int(cfg["val_examples"]),
    )
    if cfg["mode"] == "gapxx":
        gen = PerturbationGenerator(GeneratorConfig(condition_dim=victim.num_classes))
        gen, metrics = train_gapxx(train_cfg, train, victim, gen, val_data=val, run_dir=out)
    else:
        gen = PerturbationGenerator(GeneratorConfig(condition_dim=0))
        gen, metrics = train_gap_single(train_cfg, train, victim, gen,
                                        fixed_target=int(cfg["target"]), val_data=val, run_dir=out)
    epochs = [r for r in metrics.records if r.get("kind") == "epoch"]
    best = max((r["val_fooling_percent"] for r in epochs), default=0.0)
    manifest.append("run-complete", best_val_fooling_percent=best,
                    victim_checksum_after=victim.parameter_checksum(),
                    checkpoints=[str(out / "checkpoint_best.pt"), str(out / "checkpoint_last.pt")])
    print(f"trained {cfg['mode']} attacker ({budget.describe()}) -> {out}")
    return 0


# ----------------------------------------------------------------- attack

ATTACK_DEFAULTS = dict(
    victim=None, attacker=None, method="gapxx", norm="linf", epsilon=None, k=None,
    mode="untargeted", target=None, examples=256, seed=0, out=None,
    pixel_scale_255=False, cache_dir=None, force=False,
)


def cmd_attack(args):
    cfg = _resolve(args, ATTACK_DEFAULTS)
    for required in ("victim", "out"):
        if not cfg.get(required):
            raise UsageError(f"--{required} is required")
    budget = _parse_budget(cfg)
    victim = load_victim(_victim_ckpt_path(cfg["victim"]))
    out = prepare_out_dir(cfg["out"], cfg["force"])
    val = ingest_dataset(victim.spec.dataset, Split.VALIDATION, cfg["cache_dir"])
    n = min(int(cfg["examples"]), len(val))
    x, y = val.images(slice(0, n)), val.labels[:n]
    mode = AttackMode(cfg["mode"])
    request = AttackRequest(mode=mode, budget=budget,
                            target=int(cfg["target"]) if cfg.get("target") is not None else None)
    attacker_id = ""
    if cfg["method"] == "fgsm":
        x_adv = fgsm(victim, x, y, request)
        stats = attacks_mod.NormStats(budget.norm_family, budget.value,
                                      attacks_mod.measure_norm(x_adv - x, budget.norm_family),
                                      attacks_mod.measure_norm(x_adv - x, budget.norm_family))
    else:
        if not cfg.get("attacker"):
            raise UsageError(f"--method {cfg['method']} needs --attacker")
        gen = load_generator(_attacker_ckpt_path(cfg["attacker"]))
        attacker_id = Path(cfg["attacker"]).name
        if cfg["method"] == "gap-single":
            x_adv, stats = gap_single_target_attack(gen, victim, x, budget, request.target)
        else:
            x_adv, stats = gapxx_attack(gen, victim, x, request)
    record = {
        "victim_id": _victim_id(victim), "attacker_id": attacker_id, "method": cfg["method"],
        "budget": budget.describe(), "mode": mode.value, "target": request.target,
        "seed": cfg["seed"], "norm_stats": stats.summary(),
    }
    archive = out / "adversaries.npz"
    attacks_mod.save_adversary_archive(archive, x_adv, x, y, record)
    manifest = Manifest(out)
    manifest.append_run_start("attack", cfg, cfg["seed"])
    manifest.append("run-complete", archive=str(archive), **record)
    print(f"wrote {n} adversaries -> {archive}")
    return 0


# ----------------------------------------------------------------- evaluate

EVALUATE_DEFAULTS = dict(
    victim=None, attacker=None, method="gapxx", norm="linf", budgets=None,
    targeted=False, targets="1,2,3,4,5", max_examples=None, seed=0, out=None,
    pixel_scale_255=False, cache_dir=None, force=False,
)


def cmd_evaluate(args):
    cfg = _resolve(args, EVALUATE_DEFAULTS)
    for required in ("victim", "out", "budgets"):
        if cfg.get(required) in (None, False):
            raise UsageError(f"--{required} is required")
    family = NormFamily.parse(cfg["norm"])
    budgets = _budget_list(cfg, family)
    victim = load_victim(_victim_ckpt_path(cfg["victim"]))
    out = prepare_out_dir(cfg["out"], cfg["force"])
    val = ingest_dataset(victim.spec.dataset, Split.VALIDATION, cfg["cache_dir"])
    if cfg["max_examples"]:
        val = val.subset(slice(0, int(cfg["max_examples"])))
    manifest = Manifest(out)
    manifest.append_run_start("evaluate", cfg, cfg["seed"],
                              dataset_checksums={"validation": val.checksum})
    method = cfg["method"]
    gen = None
    attacker_id = ""
    if method in ("gapxx", "gap-single"):
        if not cfg.get("attacker"):
            raise UsageError(f"--method {method} needs --attacker")
        gen = load_generator(_attacker_ckpt_path(cfg["attacker"]))
        attacker_id = Path(cfg["attacker"]).name
    victim_id = _victim_id(victim)

    if cfg["targeted"]:
        targets = _int_list(cfg["targets"])
        if len(budgets) != 1:
            raise UsageError("targeted evaluation takes exactly one --budgets entry")
        budget = budgets[0]
        if method == "fgsm":
            def attacker_fn(x, y, b, t):
                return fgsm(victim, x, y, AttackRequest(AttackMode.TARGETED, b, target=t))
            report = eval_mod.evaluate_targeted(victim, attacker_fn, val, budget, targets,
                                                victim_id=victim_id, method=method, seed=cfg["seed"])
        elif method == "gapxx":
            def attacker_fn(x, y, b, t):
                return gapxx_attack(gen, victim, x, AttackRequest(AttackMode.TARGETED, b, target=t))[0]
            report = eval_mod.evaluate_targeted(victim, attacker_fn, val, budget, targets,
                                                victim_id=victim_id, attacker_id=attacker_id,
                                                method=method, seed=cfg["seed"])
        else:  # gap-single: one fixed adversary set, success read per target
            def attack_fn(x, y, b):
                return gap_single_target_attack(gen, victim, x, b)[0]
            report = eval_mod.evaluate_adversary_set(victim, attack_fn, val, budget, targets,
                                                     victim_id=victim_id, attacker_id=attacker_id,
                                                     method=method, seed=cfg["seed"])
    else:
        if method == "fgsm":
            def attack_fn(x, y, b):
                return fgsm(victim, x, y, AttackRequest(AttackMode.UNTARGETED, b))
        elif method == "gapxx":
            def attack_fn(x, y, b):
                return gapxx_attack(gen, victim, x, AttackRequest(AttackMode.UNTARGETED, b))[0]
        else:
            def attack_fn(x, y, b):
                return gap_single_target_attack(gen, victim, x, b)[0]
        report = eval_mod.evaluate_nontargeted(victim, attack_fn, val, budgets,
                                               victim_id=victim_id, attacker_id=attacker_id,
                                               method=method, seed=cfg["seed"])
    path = eval_mod.emit_report(report, out / "report.json")
    manifest.append("run-complete", report=str(path), av_percent=report.av_percent,
                    aa_percent=sorted(report.aa_percent.items()))
    for b in sorted(report.aa_percent):
        print(f"AA% @ {b:g}: {report.aa_percent[b]:.2f}  (AV% {report.av_percent:.2f})")
    for t, s in sorted(report.per_target_success.items()):
        print(f"target {t}: success {s['success_percent']:.2f}%")
    return 0


# -------------------------------------------------------------------- sweep

SWEEP_DEFAULTS = dict(
    victim=None, attacker_linf=None, attacker_l2=None, attacker_l0=None,
    families="linf,l2,l0", tv=None, targets=None, max_examples=2000, seed=0, out=None,
    cache_dir=None, force=False,
)


def cmd_sweep(args):
    cfg = _resolve(args, SWEEP_DEFAULTS)
    for required in ("victim", "out", "tv"):
        if not cfg.get(required):
            raise UsageError(f"--{required} is required")
    families = [NormFamily.parse(f) for f in str(cfg["families"]).split(",") if f]
    tv_points = [float(v) for v in str(cfg["tv"]).split(",") if v != ""]
    victim = load_victim(_victim_ckpt_path(cfg["victim"]))
    attackers = {}
    for fam in families:
        ref = cfg.get(f"attacker_{fam.value}")
        if not ref:
            raise UsageError(f"--attacker-{fam.value} is required for family {fam.value}")
        attackers[fam] = load_generator(_attacker_ckpt_path(ref))
    out = prepare_out_dir(cfg["out"], cfg["force"])
    val = ingest_dataset(victim.spec.dataset, Split.VALIDATION, cfg["cache_dir"])
    if cfg["max_examples"]:
        val = val.subset(slice(0, int(cfg["max_examples"])))
    manifest = Manifest(out)
    manifest.append_run_start("sweep", cfg, cfg["seed"],
                              dataset_checksums={"validation": val.checksum})
    table = TotalVariationTable.proportional(tv_points)
    targets = _int_list(cfg["targets"]) if cfg.get("targets") else None
    rows = eval_mod.norm_sweep(victim, attackers, val, tv_points, table=table, targets=targets)
    path = eval_mod.save_sweep_table(rows, out / "sweep.json")
    manifest.append("run-complete", table=str(path), rows=len(rows))
    for r in rows:
        print(f"tv={r['tv']:g} {r['family']}: adversary acc {r['adversary_accuracy_percent']:.2f}%"
              f", targeted success {r['targeted_success_percent']:.2f}%")
    return 0


# ----------------------------------------------------------------- visualize

VISUALIZE_DEFAULTS = dict(
    kind="grid", victim=None, attacker=None, table=None, norm="linf", epsilon=None, k=None,
    targets="1,2,3,4,5", samples=8, seed=0, out=None, pixel_scale_255=False,
    cache_dir=None, force=False,
)


def cmd_visualize(args):
    cfg = _resolve(args, VISUALIZE_DEFAULTS)
    if not cfg.get("out"):
        raise UsageError("--out is required")
    if cfg["kind"] == "sweep":
        if not cfg.get("table"):
            raise UsageError("--kind sweep needs --table")
        rows = eval_mod.load_sweep_table(cfg["table"])
        out = Path(cfg["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        meta = viz_mod.render_sweep(rows, out)
        print(f"sweep plot -> {meta['plot']}")
        return 0
    for required in ("victim", "attacker"):
        if not cfg.get(required):
            raise UsageError(f"--{required} is required for --kind grid")
    budget = _parse_budget(cfg)
    victim = load_victim(_victim_ckpt_path(cfg["victim"]))
    gen = load_generator(_attacker_ckpt_path(cfg["attacker"]))
    val = ingest_dataset(victim.spec.dataset, Split.VALIDATION, cfg["cache_dir"])
    out = prepare_out_dir(cfg["out"], cfg["force"])
    spec = viz_mod.GridSpec(rows=_int_list(cfg["targets"]), cols=list(range(int(cfg["samples"]))))
    meta = viz_mod.render_grid(gen, victim, val.images(slice(0, max(spec.cols) + 1)), spec, budget, out)
    Manifest(out).append_run_start("visualize", cfg, cfg["seed"], files=meta["files"])
    print(f"grids -> {out}")
    return 0


# --------------------------------------------------------------------- main

def _add_common(p):
    p.add_argument("--config", help="YAML config file (CLI flags take precedence)")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", help="artifact output directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty --out")
    p.add_argument("--cache-dir", help="dataset cache directory (default GAPXX_CACHE_DIR)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gapxx",
                                     description="Target-conditioned adversarial perturbation toolkit")
    parser.set_defaults(func=None)
    sub = parser.add_subparsers(dest="subcommand")

    p = sub.add_parser("train-victim", help="train and freeze a victim classifier",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("--dataset", choices=["mnist", "cifar10"])
    p.add_argument("--arch", choices=[a.value for a in VictimArch])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--target-av", type=float, help="stop when validation accuracy enters this window")
    p.add_argument("--target-tolerance", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_train_victim)

    p = sub.add_parser("train-attacker", help="train a GAP++ or single-target GAP attacker",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("--victim")
    p.add_argument("--norm", choices=["linf", "l2", "l0"])
    p.add_argument("--epsilon", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--mode", choices=["gapxx", "gap-single"])
    p.add_argument("--target", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--train-subset", type=int)
    p.add_argument("--val-examples", type=int)
    p.add_argument("--pixel-scale-255", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_train_attacker)

    p = sub.add_parser("attack", help="emit an adversarial example archive",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("--victim")
    p.add_argument("--attacker")
    p.add_argument("--method", choices=["gapxx", "gap-single", "fgsm"])
    p.add_argument("--norm", choices=["linf", "l2", "l0"])
    p.add_argument("--epsilon", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--mode", choices=["untargeted", "targeted"])
    p.add_argument("--target", type=int)
    p.add_argument("--examples", type=int)
    p.add_argument("--pixel-scale-255", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="adversary-set accuracy and targeted success reports",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("--victim")
    p.add_argument("--attacker")
    p.add_argument("--method", choices=["gapxx", "gap-single", "fgsm"])
    p.add_argument("--norm", choices=["linf", "l2", "l0"])
    p.add_argument("--budgets", help="comma-separated budget values (epsilon, or k for l0)")
    p.add_argument("--targeted", action="store_true")
    p.add_argument("--targets", help="comma-separated target classes")
    p.add_argument("--max-examples", type=int)
    p.add_argument("--pixel-scale-255", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="norm-family sweep over total-variation points",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("--victim")
    p.add_argument("--attacker-linf")
    p.add_argument("--attacker-l2")
    p.add_argument("--attacker-l0")
    p.add_argument("--families")
    p.add_argument("--tv", help="comma-separated total-variation points")
    p.add_argument("--targets")
    p.add_argument("--max-examples", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("visualize", help="render adversary grids or sweep plots",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("--kind", choices=["grid", "sweep"])
    p.add_argument("--victim")
    p.add_argument("--attacker")
    p.add_argument("--table", help="sweep table JSON (for --kind sweep)")
    p.add_argument("--norm", choices=["linf", "l2", "l0"])
    p.add_argument("--epsilon", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--targets")
    p.add_argument("--samples", type=int)
    p.add_argument("--pixel-scale-255", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_visualize)

    return parser


def main(argv=None) -> int:
    torch.set_num_threads(max(1, torch.get_num_threads()))
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.func is None:
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except GapxxError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
