"""scikit-learn style wrappers around degradation and slice restoration."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import TrainConfig
from .losses import psnr
from .model import AblationFlags, get_profile
from .volume import SlicePair, Volume, crop, pad_to, simulate_lr


def check_slices(X, name: str = "X") -> np.ndarray:
    """Validate a stack of 2-D slices; a single slice is promoted to a stack of one."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"{name} must be (n_slices, height, width), got shape {X.shape}")
    if len(X) == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_volumes(X) -> list[Volume]:
    if isinstance(X, Volume):
        return [X]
    if isinstance(X, np.ndarray) and X.ndim == 3:
        return [Volume(X)]
    vols = [v if isinstance(v, Volume) else Volume(v) for v in X]
    if not vols:
        raise ValueError("no volumes given")
    return vols


class ThickSliceSimulator(TransformerMixin, BaseEstimator):
    """Decimate along ``axis`` by ``scale`` and cubic-interpolate back to the HR grid."""

    def __init__(self, scale: int = 4, axis: str = "z", mode: str = "decimate"):
        self.scale = scale
        self.axis = axis
        self.mode = mode

    def fit(self, X, y=None):
        check_volumes(X)
        return self

    def transform(self, X):
        return [simulate_lr(v, self.scale, self.axis, self.mode) for v in check_volumes(X)]


class SliceSuperResolver(RegressorMixin, BaseEstimator):
    """Restoration network fitted on (interpolated LR, HR) slice stacks.

    ``use_gp`` / ``use_sdt`` default to ``"auto"``: enabled exactly when
    ``prior`` / ``centroid_bank`` are supplied. ``score`` is mean PSNR in dB.
    """

    def __init__(self, profile="toy", scale=4, use_gp="auto", use_sdt="auto", use_mref=True, use_sc=True,
                 phi=0.7, lr=1e-3, batch_size=6, max_epochs=100, max_steps=0, early_stop_delta=0.05,
                 early_stop_patience=10, lambda_recon=1.0, lambda_cont=0.5, lambda_style=0.5,
                 backbone_width=0.25, grad_clip=1.0, augment=True, seed=0, prior=None, centroid_bank=None):
        self.profile = profile
        self.scale = scale
        self.use_gp = use_gp
        self.use_sdt = use_sdt
        self.use_mref = use_mref
        self.use_sc = use_sc
        self.phi = phi
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.max_steps = max_steps
        self.early_stop_delta = early_stop_delta
        self.early_stop_patience = early_stop_patience
        self.lambda_recon = lambda_recon
        self.lambda_cont = lambda_cont
        self.lambda_style = lambda_style
        self.backbone_width = backbone_width
        self.grad_clip = grad_clip
        self.augment = augment
        self.seed = seed
        self.prior = prior
        self.centroid_bank = centroid_bank

    def _flags(self):
        gp = self.prior is not None if self.use_gp == "auto" else bool(self.use_gp)
        sdt = self.centroid_bank is not None if self.use_sdt == "auto" else bool(self.use_sdt)
        return AblationFlags(gp, sdt, bool(self.use_mref), bool(self.use_sc))

    def _config(self):
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                           early_stop_delta=self.early_stop_delta, early_stop_patience=self.early_stop_patience,
                           scale_r=self.scale, flags=self._flags(), phi=self.phi, seed=self.seed,
                           profile=self.profile, max_steps=self.max_steps, lambda_recon=self.lambda_recon,
                           lambda_cont=self.lambda_cont, lambda_style=self.lambda_style,
                           backbone_width=self.backbone_width, grad_clip=self.grad_clip, augment=self.augment)

    def _image_size(self):
        return self.prior.generator.cfg.image_size if self.prior is not None else get_profile(self.profile).image_size

    def _pairs(self, X, y):
        size = self._image_size()
        pairs = []
        for i, (lo, hi) in enumerate(zip(X, y)):
            lp, box = pad_to(lo, size)
            hp, _ = pad_to(hi, size)
            pairs.append(SlicePair(lp, hp, "x-z", i, self.scale, box))
        return pairs

    def fit(self, X, y, X_val=None, y_val=None):
        from .training import train_sr

        X, y = check_slices(X), check_slices(y, "y")
        if X.shape != y.shape:
            raise ValueError(f"X {X.shape} and y {y.shape} must have the same shape")
        val = []
        if X_val is not None:
            X_val, y_val = check_slices(X_val, "X_val"), check_slices(y_val, "y_val")
            val = self._pairs(X_val, y_val)
        mcfg = self.prior.generator.cfg if self.prior is not None else None
        result = train_sr(self._config(), self._pairs(X, y), val, self.prior, self.centroid_bank,
                          model_config=mcfg)
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.slice_shape_ = X.shape[1:]
        return self

    def predict(self, X):
        import torch

        check_is_fitted(self, "model_")
        X = check_slices(X)
        size = self.model_.cfg.image_size
        padded, boxes = zip(*(pad_to(x, size) for x in X))
        sr = self.model_.predict(torch.from_numpy(np.stack(padded)[:, None])).numpy()[:, 0]
        return np.stack([crop(s, b) for s, b in zip(sr, boxes)])

    def score(self, X, y, sample_weight=None):
        pred = self.predict(X)
        y = check_slices(y, "y")
        scores = [psnr(p, t) for p, t in zip(pred, y)]
        return float(np.average(scores, weights=sample_weight))
