"""mtpt: a desk-scale laboratory for meta test-time prompt tuning.

A small dual-encoder classifier is trained from scratch on a synthetic
shape benchmark; at test time, per-sample learnable affine augmentations
(inner loop) and consistency-regularized prompt updates (outer loop) adapt
it to shifted domains. Ships the entropy-minimization baseline over fixed
views, one-stage and offline ablations, and a deterministic experiment
harness.
"""

__version__ = "0.1.0"

from .autodiff import DiffError, NonFiniteOutput, ShapeMismatch, Tape, Tensor, backward, grad_check
from .datasets import BUILTIN_DOMAINS, CLASS_NAMES, DomainSpec, Split, gen_split
from .engine import (
    METHODS,
    AdaptConfig,
    AdaptOutcome,
    adapt_sample,
    final_predict,
    offline_ablation,
    one_stage_ablation,
    tpt_baseline,
)
from .estimators import DualEncoderClassifier, TestTimeClassifier
from .losses import LossFlags
from .model import FrozenModel, ModelConfig, PretrainConfig, PromptState, pretrain_source
from .warp import AffineBatch, ema_update, init_phi_K, init_phi_V, warp_image

__all__ = [
    "__version__",
    "AdaptConfig",
    "AdaptOutcome",
    "AffineBatch",
    "BUILTIN_DOMAINS",
    "CLASS_NAMES",
    "DiffError",
    "DomainSpec",
    "DualEncoderClassifier",
    "FrozenModel",
    "LossFlags",
    "METHODS",
    "ModelConfig",
    "NonFiniteOutput",
    "PretrainConfig",
    "PromptState",
    "ShapeMismatch",
    "Split",
    "Tape",
    "Tensor",
    "TestTimeClassifier",
    "adapt_sample",
    "backward",
    "ema_update",
    "final_predict",
    "gen_split",
    "grad_check",
    "init_phi_K",
    "init_phi_V",
    "offline_ablation",
    "one_stage_ablation",
    "pretrain_source",
    "tpt_baseline",
    "warp_image",
]
