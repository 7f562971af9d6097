"""scikit-learn style wrapper: ``fit`` trains and fuses denoisers, ``transform`` runs the fused backbone."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .backbone import ToyBackbone
from .denoiser import TrainConfig, train_denoisers
from .fusion import FusionMode, explicit_forward, fuse_model, verify_equivalence
from .numerics import Rng
from .schedule import NoiseSchedule


class DenoisingFeatureExtractor(TransformerMixin, BaseEstimator):
    """Denoise a frozen backbone's features at zero inference cost.

    Parameters
    ----------
    backbone : ToyBackbone
        Frozen feature extractor; never modified.
    T, beta_start, beta_end : int, float, float
        Linear noise schedule. The defaults are the retrieval benchmark preset.
    epochs, lr, batch_size : int, float, int
        Mini-batch gradient descent settings for each per-block denoiser.
    lam : float
        Weight on the supervised cross-entropy term; 0 trains label-free.
    algebra, z_policy, noise_scale, steps_per_layer
        Fusion options, see :class:`~denoisefuse.fusion.FusionMode`.
    random_state : int
        Seeds training noise and, for ``z_policy='sampled_once'``, the baked-in draw.

    Attributes
    ----------
    schedule_ : NoiseSchedule
    denoisers_ : list of DenoiseLayer
    fused_ : FusedModel
    train_report_ : TrainReport
    """

    def __init__(self, backbone=None, T=1000, beta_start=0.2, beta_end=0.2, epochs=60, lr=0.02,
                 batch_size=64, lam=0.0, algebra="derivation_consistent", z_policy="zero",
                 noise_scale="sigma", steps_per_layer=1, random_state=0):
        self.backbone = backbone
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.lam = lam
        self.algebra = algebra
        self.z_policy = z_policy
        self.noise_scale = noise_scale
        self.steps_per_layer = steps_per_layer
        self.random_state = random_state

    def _mode(self) -> FusionMode:
        return FusionMode(self.algebra, self.z_policy, self.noise_scale, self.steps_per_layer)

    def fit(self, X, y=None):
        if not isinstance(self.backbone, ToyBackbone):
            raise TypeError("backbone must be a ToyBackbone")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.backbone.d_in:
            raise ValueError(f"X has {X.shape[1]} features, backbone expects {self.backbone.d_in}")
        if self.lam > 0 and y is None:
            raise ValueError("lam > 0 requires labels y")
        mode = self._mode()
        self.schedule_ = NoiseSchedule(self.T, self.beta_start, self.beta_end)
        cfg = TrainConfig(epochs=self.epochs, lr=self.lr, batch=self.batch_size,
                          seed=self.random_state, lam=self.lam)
        self.denoisers_, self.train_report_ = train_denoisers(
            self.backbone, X, self.schedule_, cfg, labels=y if self.lam > 0 else None,
            steps_per_layer=mode.steps_per_layer)
        self.fused_ = fuse_model(self.backbone, self.denoisers_, self.schedule_, mode,
                                 Rng(self.random_state))
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "fused_")
        X = check_array(X, dtype=np.float64)
        return self.fused_(X)

    def transform_explicit(self, X):
        """Same features computed by running each denoiser explicitly (slower reference path)."""
        check_is_fitted(self, "fused_")
        X = check_array(X, dtype=np.float64)
        return explicit_forward(self.backbone, self.denoisers_, self.schedule_, X, self._mode(),
                                self.fused_.noise)

    def verify(self, samples=1000, tol=1e-9, seed=0) -> dict:
        check_is_fitted(self, "fused_")
        return verify_equivalence(self.backbone, self.denoisers_, self.fused_, self.schedule_,
                                  self._mode(), samples, tol, seed)
