"""gapxx: target-conditioned adversarial perturbation toolkit.

One conditional generator covers every targeted attack and the untargeted
attack against a fixed white-box classifier, with L-inf/L2/L0 budget
projection, FGSM and single-target GAP baselines, and an evaluation harness.
"""

from .budget import (
    NormFamily,
    PerturbationBudget,
    PixelRange,
    TotalVariationTable,
    clip_to_valid,
    measure_norm,
    project_l0_topk,
    project_rescale,
    total_variation_equivalent,
)
from .generator import GeneratorConfig, PerturbationGenerator, encode_condition, inject_condition
from .victims import VictimArch, VictimClassifier, VictimSpec, build_victim

__version__ = "0.1.0"

__all__ = [
    "NormFamily",
    "PerturbationBudget",
    "PixelRange",
    "TotalVariationTable",
    "clip_to_valid",
    "measure_norm",
    "project_l0_topk",
    "project_rescale",
    "total_variation_equivalent",
    "GeneratorConfig",
    "PerturbationGenerator",
    "encode_condition",
    "inject_condition",
    "VictimArch",
    "VictimClassifier",
    "VictimSpec",
    "build_victim",
    "__version__",
]
