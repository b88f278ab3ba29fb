"""scikit-learn style wrappers around the trainer and the joint-map encoder."""
from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_poses, check_samples
from .skeleton import make_default_tree, rasterize_batch
from .trainer import TrainConfig, TrainState, repose_batch, train_on_samples

_DEFAULTS = TrainConfig()


class JointMapEncoder(TransformerMixin, BaseEstimator):
    """Poses ``(B, N, 2)`` -> joint maps ``(B, N, height, width)``."""

    def __init__(self, height=128, width=128, thickness=3):
        self.height = height
        self.width = width
        self.thickness = thickness

    def fit(self, X=None, y=None):
        if self.height < 1 or self.width < 1 or self.thickness < 1:
            raise ValueError("height, width and thickness must be >= 1")
        self.tree_ = make_default_tree()
        self.n_features_in_ = self.tree_.n_joints * 2
        return self

    def transform(self, X):
        check_is_fitted(self, "tree_")
        poses = check_poses(X, self.tree_)
        return rasterize_batch(poses, self.tree_, self.height, self.width, self.thickness)


class PoseReposer(BaseEstimator):
    """Train a reposing cGAN with ``fit`` and apply it with ``predict``.

    Constructor arguments are the :class:`TrainConfig` fields; ``fit`` takes
    a list of training samples.
    """

    def __init__(self, batch_size=_DEFAULTS.batch_size, lr=_DEFAULTS.lr,
                 adam_beta1=_DEFAULTS.adam_beta1, adam_beta2=_DEFAULTS.adam_beta2,
                 epochs=_DEFAULTS.epochs, iterations_per_epoch=_DEFAULTS.iterations_per_epoch,
                 lam=_DEFAULTS.lam, seed=_DEFAULTS.seed, adv_mode=_DEFAULTS.adv_mode,
                 d_steps=_DEFAULTS.d_steps, use_discriminator=_DEFAULTS.use_discriminator,
                 n_stacks=_DEFAULTS.n_stacks, resolution=_DEFAULTS.resolution,
                 depth=_DEFAULTS.depth, feat_channels=_DEFAULTS.feat_channels,
                 downsample_mode=_DEFAULTS.downsample_mode, d_layers=_DEFAULTS.d_layers,
                 d_base_channels=_DEFAULTS.d_base_channels,
                 jmap_thickness=_DEFAULTS.jmap_thickness, out_dir=None):
        self.batch_size = batch_size
        self.lr = lr
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.epochs = epochs
        self.iterations_per_epoch = iterations_per_epoch
        self.lam = lam
        self.seed = seed
        self.adv_mode = adv_mode
        self.d_steps = d_steps
        self.use_discriminator = use_discriminator
        self.n_stacks = n_stacks
        self.resolution = resolution
        self.depth = depth
        self.feat_channels = feat_channels
        self.downsample_mode = downsample_mode
        self.d_layers = d_layers
        self.d_base_channels = d_base_channels
        self.jmap_thickness = jmap_thickness
        self.out_dir = out_dir

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        params = {k: v for k, v in self.get_params().items() if k in names}
        return TrainConfig(sample_every=0, **params)

    def fit(self, X, y=None):
        samples = check_samples(X)
        h, w = samples[0].input_image.shape[:2]
        if (h, w) != (self.resolution, self.resolution):
            raise ValueError(f"samples are {h}x{w}; resolution is {self.resolution}")
        self.state_ = train_on_samples(TrainState(self.train_config()), samples, self.out_dir)
        self.n_iter_ = self.state_.iteration
        return self

    @classmethod
    def from_state(cls, state: TrainState) -> "PoseReposer":
        """Wrap an already trained state (e.g. a loaded checkpoint)."""
        cfg = state.config
        names = cls._get_param_names()
        est = cls(**{k: getattr(cfg, k) for k in names if hasattr(cfg, k)})
        est.state_ = state
        est.n_iter_ = state.iteration
        return est

    def predict(self, images, poses) -> np.ndarray:
        """Repose each image to the matching target pose; returns ``(B, H, W, 3)``."""
        check_is_fitted(self, "state_")
        imgs = check_images(images)
        tps = check_poses(poses, self.state_.tree, n=len(imgs))
        return repose_batch(self.state_, list(imgs), list(tps))

    def score(self, X, y=None) -> float:
        """Oracle-detected mean PCK@0.5 on toy samples."""
        from .evaluator import evaluate
        check_is_fitted(self, "state_")
        return evaluate(self.state_, check_samples(X)).pck_mean
