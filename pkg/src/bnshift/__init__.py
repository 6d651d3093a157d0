"""bnshift: batch-norm statistics adaptation under domain shift.

Autodiff tensor core, conv/BN layers with train/tr/tt statistics regimes,
gradient-reversal adversarial adaptation, a saliency-driven global/local
classifier, a synthetic multi-domain benchmark, and BN-activation shift
diagnostics.
"""

__version__ = "0.1.0"

from .adversarial import LambdaScheduler, grl_apply, schedule_lambda
from .batchnorm import BNLayer, StatsMode, set_mode, tap_activations
from .datagen import DomainDataset, DomainSpec, augment, generate, preprocess
from .diagnostics import jsd, kde, layer_divergence
from .metrics import aggregate_views, bootstrap_ci, pr_auc, roc_auc
from .model import GlobalLocalFusionNet, ModelConfig, load_checkpoint, save_checkpoint
from .tensor import Tensor, no_grad
from .training import Adam, ExperimentSpec, run_experiment

__all__ = [
    "__version__",
    "Tensor",
    "no_grad",
    "BNLayer",
    "StatsMode",
    "set_mode",
    "tap_activations",
    "LambdaScheduler",
    "grl_apply",
    "schedule_lambda",
    "GlobalLocalFusionNet",
    "ModelConfig",
    "save_checkpoint",
    "load_checkpoint",
    "DomainSpec",
    "DomainDataset",
    "generate",
    "preprocess",
    "augment",
    "jsd",
    "kde",
    "layer_divergence",
    "roc_auc",
    "pr_auc",
    "aggregate_views",
    "bootstrap_ci",
    "Adam",
    "ExperimentSpec",
    "run_experiment",
]
