"""Pose-conditioned figure reposing with a stacked hourglass cGAN."""
from .estimator import JointMapEncoder, PoseReposer
from .evaluator import EvalReport, evaluate, pck
from .netgraph import (
    DiscriminatorConfig,
    GeneratorConfig,
    HourglassConfig,
    build_discriminator,
    build_generator,
)
from .objective import LossReport, combined_generator_objective, discriminator_loss
from .skeleton import KinematicTree, make_default_tree, rasterize_jmap
from .toydata import Sample, ToyConfig, make_dataset, read_dataset, write_dataset
from .trainer import TrainConfig, TrainState, load_checkpoint, repose, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "DiscriminatorConfig", "EvalReport", "GeneratorConfig", "HourglassConfig",
    "JointMapEncoder", "KinematicTree", "LossReport", "PoseReposer", "Sample", "ToyConfig",
    "TrainConfig", "TrainState", "build_discriminator", "build_generator",
    "combined_generator_objective", "discriminator_loss", "evaluate", "load_checkpoint",
    "make_dataset", "make_default_tree", "pck", "rasterize_jmap", "read_dataset", "repose",
    "save_checkpoint", "train", "write_dataset",
]
