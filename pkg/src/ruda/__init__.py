"""Robust unsupervised domain adaptation: adversarial feature matching plus
discriminative clustering of target features."""

from .data import (DomainDataset, Minibatch, balance_source, load_idx, make_synthetic_pair,
                   resample_linear_decay, sample_minibatch, subset_partial)
from .nets import (ClassifierSpec, DiscriminatorSpec, EncoderSpec, ModelBundle, build_models,
                   classify, discriminate, encode)
from .adapt import AdaptationConfig, pretrain_source, run_adaptation, lr_sweep
from .evaluation import MetricsReport, cluster_accuracy, evaluate

__version__ = "0.1.0"
