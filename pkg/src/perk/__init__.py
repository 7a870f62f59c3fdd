"""Kernel-regression parameter estimation for quantitative MRI.

Estimators are trained on simulated (latent, known, noisy magnitude) samples
and then applied voxel by voxel. A dictionary search baseline, a Bloch
simulator for checking the signal models, and bias/variance analysis tools
are included.
"""

from .errors import ConfigError, ConvergenceError, DataError, NumericalError, PerkError
from .estimator import (
    ExactPerk,
    KernelConfig,
    RffPerk,
    TrainingSet,
    bandwidth_from_test_data,
    generate_training_set,
    predict,
    predict_exact,
    predict_map,
    rff_draw,
    train_exact,
    train_rff,
)
from .priors import PriorSpec, paper_default_priors
from .signals import Acquisition, KnownParams, LatentParams, NoiseModel, ScanKind, ScanSpec, acquisition_signal, reference_acquisition

__version__ = "0.1.0"
