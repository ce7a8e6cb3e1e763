"""Label-partitioned GAN training on a small numpy neural-network core."""

from .data import Dataset, SyntheticSpec, make_synthetic, read_cifar_binary, read_idx
from .evaluation import anova_f, anova_per_channel, inception_score, train_surrogate_classifier
from .gan import GanPair, TrainConfig, build_pair, generate, train_gan, train_step
from .nn import Network, backward, build_network, forward, grad_check
from .optim import AdamState, adam_step
from .partition import (
    ClassPrior,
    estimate_priors,
    mixture_sample,
    partition_by_label,
    train_distributed,
    train_single,
)

__all__ = [
    "AdamState",
    "ClassPrior",
    "Dataset",
    "GanPair",
    "Network",
    "SyntheticSpec",
    "TrainConfig",
    "adam_step",
    "anova_f",
    "anova_per_channel",
    "backward",
    "build_network",
    "build_pair",
    "estimate_priors",
    "forward",
    "generate",
    "grad_check",
    "inception_score",
    "make_synthetic",
    "mixture_sample",
    "partition_by_label",
    "read_cifar_binary",
    "read_idx",
    "train_distributed",
    "train_gan",
    "train_single",
    "train_step",
    "train_surrogate_classifier",
]

__version__ = "0.1.0"
