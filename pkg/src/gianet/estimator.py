"""scikit-learn style wrappers around preprocessing and the restoration network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import trainer
from .losses import psnr
from .models import predict
from .raw import DEFAULT_RATIO_CAP, RawFrame, preprocess
from .validation import check_packed, check_pairs


class RawPreprocessor(TransformerMixin, BaseEstimator):
    """Pack, normalise and amplify a list of RawFrames.

    Stateless; ``fit`` only records the CFA seen so mixed inputs are caught.
    """

    def __init__(self, target_exposure_s=10.0, ratio_cap=DEFAULT_RATIO_CAP):
        self.target_exposure_s = target_exposure_s
        self.ratio_cap = ratio_cap

    def fit(self, X, y=None):
        frames = self._frames(X)
        self.cfa_ = frames[0].cfa if frames else None
        return self

    def transform(self, X):
        check_is_fitted(self, "cfa_")
        frames = self._frames(X)
        for f in frames:
            if self.cfa_ is not None and f.cfa != self.cfa_:
                raise ValueError(f"fitted on {self.cfa_} frames, got {f.cfa}")
        return [preprocess(f, self.target_exposure_s, self.ratio_cap) for f in frames]

    @staticmethod
    def _frames(X):
        frames = list(X)
        for f in frames:
            if not isinstance(f, RawFrame):
                raise TypeError(f"expected RawFrame, got {type(f).__name__}")
        return frames


class GiaRestorer(BaseEstimator):
    """Train a (desk-scale by default) U-Net variant on packed/RGB pairs.

    ``fit(X, y)`` takes packed inputs and (1, 3, H, W) targets; ``predict``
    returns clamped RGB arrays; ``score`` is the mean PSNR in dB.
    """

    def __init__(
        self,
        variant="gia",
        width_scale=0.25,
        depth=4,
        lr=1e-4,
        gamma=0.84,
        max_steps=200,
        epochs_per_phase=2000,
        patch_a=8,
        patch_b_min=4,
        patch_b_max=6,
        msssim_levels=3,
        seed=0,
    ):
        self.variant = variant
        self.width_scale = width_scale
        self.depth = depth
        self.lr = lr
        self.gamma = gamma
        self.max_steps = max_steps
        self.epochs_per_phase = epochs_per_phase
        self.patch_a = patch_a
        self.patch_b_min = patch_b_min
        self.patch_b_max = patch_b_max
        self.msssim_levels = msssim_levels
        self.seed = seed

    def train_config(self) -> trainer.TrainConfig:
        return trainer.TrainConfig(
            lr_initial=self.lr,
            gamma=self.gamma,
            seed=self.seed,
            epochs_per_phase=self.epochs_per_phase,
            patch_a=self.patch_a,
            patch_b_min=self.patch_b_min,
            patch_b_max=self.patch_b_max,
            variant=self.variant,
            width_scale=self.width_scale,
            depth=self.depth,
            msssim_levels=self.msssim_levels,
            max_steps=self.max_steps,
        )

    def fit(self, X, y):
        samples = check_pairs(X, y)
        cfg = self.train_config()
        result = trainer.train(cfg, samples)
        self.net_ = result.net
        self.loss_curve_ = np.array(result.losses)
        self.n_steps_ = result.step
        self.in_ch_ = samples[0].input.tensor.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        return [predict(self.net_, check_packed(x, self.in_ch_))[0] for x in X]

    def score(self, X, y):
        preds = self.predict(X)
        return float(np.mean([psnr(p, np.asarray(t, dtype=np.float32).reshape(p.shape)) for p, t in zip(preds, y)]))
