"""Learnable linear combinations of frozen random convolution filters.

A numpy reverse-mode autodiff engine, LC-Blocks with exact folding,
CIFAR-style ResNet / ResNet-LC builders, the training recipe, filter
diagnostics, FGSM robustness evaluation and a scikit-learn wrapper.
"""

from .estimator import LCResNetClassifier
from .lc_block import FoldError, Intermediate, LCBlock, LCBlockConfig, fold, lc_forward, wrap_conv_as_lc
from .models import ModelSpec, build_resnet_lc, fold_model, param_census

__version__ = "0.1.0"

__all__ = [
    "FoldError",
    "Intermediate",
    "LCBlock",
    "LCBlockConfig",
    "LCResNetClassifier",
    "ModelSpec",
    "build_resnet_lc",
    "fold",
    "fold_model",
    "lc_forward",
    "param_census",
    "wrap_conv_as_lc",
]
