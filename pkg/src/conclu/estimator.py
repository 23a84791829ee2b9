"""Scikit-learn style front door: fit on raw clouds, transform to features.

``ConCluEncoder`` wraps the full pretraining pipeline behind the estimator
API so the learned representation composes with ordinary sklearn tooling
(pipelines, grid search via get_params/set_params, downstream classifiers
on the transformed features). fit() runs unsupervised pretraining,
transform() returns frozen global features, predict() returns per-point
cluster labels.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import evaluate, trainer
from .errors import ConfigError, ShapeError
from .geometry import AugmentConfig, PointCloud, normalize_cloud
from .network import NetworkConfig


def check_cloud_array(x, index=None):
    """Validate one cloud given as an (N, 3) array-like; returns PointCloud."""
    where = "" if index is None else f" at position {index}"
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeError(f"cloud{where} must be (N,3), got shape {arr.shape}")
    return PointCloud(arr)


def as_point_clouds(x):
    """Coerce fit/transform input into a list of PointClouds.

    Accepts a list/tuple of (N,3) arrays or PointClouds, or a single
    (M, N, 3) array.
    """
    if isinstance(x, np.ndarray):
        if x.ndim != 3 or x.shape[2] != 3:
            raise ShapeError(f"cloud stack must be (M,N,3), got shape {x.shape}")
        return [PointCloud(x[i]) for i in range(x.shape[0])]
    if isinstance(x, (list, tuple)):
        return [
            pc if isinstance(pc, PointCloud) else check_cloud_array(pc, i)
            for i, pc in enumerate(x)
        ]
    raise ShapeError(f"expected a list of clouds or an (M,N,3) array, got {type(x)!r}")


class ConCluEncoder(TransformerMixin, BaseEstimator):
    """Unsupervised point-cloud feature encoder (clustering + contrasting).

    Parameters mirror the network/training/augmentation configs; see
    :class:`~conclu.network.NetworkConfig`, :class:`~conclu.trainer.TrainConfig`
    and :class:`~conclu.geometry.AugmentConfig` for semantics. All defaults
    are the desk-scale values.
    """

    def __init__(
        self,
        num_prototypes=64,
        encoder_widths=(3, 64, 128, 256),
        head_widths=None,
        proj_hidden=128,
        proj_out=64,
        pred_hidden=32,
        bn_scope="cloud",
        epochs=200,
        batch_size=32,
        lr=1e-3,
        lr_decay=0.7,
        lr_decay_every=20,
        weight_decay=1e-2,
        eta=2e-3,
        sinkhorn_epsilon=1e-3,
        sinkhorn_iters=20,
        keep_fraction=0.85,
        out_points=None,
        max_angle_deg=5.0,
        jitter_sigma=0.01,
        jitter_clip=0.025,
        loss_mode="joint",
        normalize=True,
        seed=0,
    ):
        self.num_prototypes = num_prototypes
        self.encoder_widths = encoder_widths
        self.head_widths = head_widths
        self.proj_hidden = proj_hidden
        self.proj_out = proj_out
        self.pred_hidden = pred_hidden
        self.bn_scope = bn_scope
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.weight_decay = weight_decay
        self.eta = eta
        self.sinkhorn_epsilon = sinkhorn_epsilon
        self.sinkhorn_iters = sinkhorn_iters
        self.keep_fraction = keep_fraction
        self.out_points = out_points
        self.max_angle_deg = max_angle_deg
        self.jitter_sigma = jitter_sigma
        self.jitter_clip = jitter_clip
        self.loss_mode = loss_mode
        self.normalize = normalize
        self.seed = seed

    def _network_config(self):
        return NetworkConfig(
            encoder_widths=tuple(self.encoder_widths),
            head_widths=None if self.head_widths is None else tuple(self.head_widths),
            proj_hidden=self.proj_hidden,
            proj_out=self.proj_out,
            pred_hidden=self.pred_hidden,
            num_prototypes=self.num_prototypes,
            bn_scope=self.bn_scope,
            seed=self.seed,
        )

    def _train_config(self, clouds):
        out_points = self.out_points
        if out_points is None:
            sizes = {pc.n for pc in clouds}
            if len(sizes) > 1:
                raise ConfigError(
                    "clouds have mixed sizes; set out_points to resample them "
                    f"to a fixed count (saw sizes {sorted(sizes)[:5]}...)"
                )
            out_points = sizes.pop()
        return trainer.TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            lr_decay=self.lr_decay,
            lr_decay_every=self.lr_decay_every,
            weight_decay=self.weight_decay,
            eta=self.eta,
            sinkhorn_epsilon=self.sinkhorn_epsilon,
            sinkhorn_iters=self.sinkhorn_iters,
            augment=AugmentConfig(
                keep_fraction=self.keep_fraction,
                out_points=out_points,
                max_angle_deg=self.max_angle_deg,
                jitter_sigma=self.jitter_sigma,
                jitter_clip=self.jitter_clip,
                seed=self.seed,
            ),
            seed=self.seed,
            loss_mode=self.loss_mode,
        )

    def _prepare(self, x):
        clouds = as_point_clouds(x)
        if self.normalize:
            clouds = [normalize_cloud(pc) for pc in clouds]
        return clouds

    def fit(self, X, y=None):
        """Pretrain the encoder on unlabeled clouds; y is ignored."""
        clouds = self._prepare(X)
        cfg = self._train_config(clouds)
        self.state_, self.log_ = trainer.train(clouds, self._network_config(), cfg)
        self.train_config_ = cfg
        self.n_features_ = self.state_.cfg.feature_dim
        return self

    def _check_fitted(self):
        if not hasattr(self, "state_"):
            raise NotFittedError(
                "This ConCluEncoder instance is not fitted yet; call fit first."
            )

    def transform(self, X):
        """Frozen global features, one row per cloud."""
        self._check_fitted()
        table = evaluate.extract_features(self.state_, self._prepare(X))
        return table.rows

    def predict(self, X):
        """Per-point balanced-cluster labels, one array per cloud."""
        self._check_fitted()
        return [
            evaluate.hard_assignments(self.state_, pc, self.train_config_)
            for pc in self._prepare(X)
        ]
