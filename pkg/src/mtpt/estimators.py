"""Scikit-learn-style estimators wrapping the training and adaptation engine.

`DualEncoderClassifier.fit` runs source pretraining and freezes the
encoders; `predict` is the zero-shot path. `TestTimeClassifier` wraps a
fitted base (or a checkpoint on disk) and adapts per sample inside
`predict`, so the whole dual-loop machine composes with pipelines,
`cross_val_score`, and friends.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import checkpoint as ckpt
from .engine import METHODS, AdaptConfig, AdaptOutcome, derive_sample_seed, offline_ablation, run_method
from .losses import LossFlags
from .model import (
    FrozenModel,
    ModelConfig,
    PretrainConfig,
    PromptState,
    predict_batch,
    pretrain_source,
)
from .validation import check_images, check_labels


class DualEncoderClassifier(BaseEstimator, ClassifierMixin):
    """Trainable dual-encoder image classifier with prompt parameters.

    fit(X, y) trains everything on the source split and freezes all but the
    prompts; predict/predict_proba run the zero-shot path.
    """

    def __init__(
        self,
        image_size=32,
        channels=3,
        patch_size=8,
        d_model=32,
        n_blocks=2,
        n_ctx=4,
        n_vp=2,
        fusion_hidden=64,
        tau=0.07,
        epochs=40,
        batch_size=64,
        learning_rate=3e-3,
        weight_decay=1e-4,
        holdout_fraction=0.15,
        random_state=0,
    ):
        self.image_size = image_size
        self.channels = channels
        self.patch_size = patch_size
        self.d_model = d_model
        self.n_blocks = n_blocks
        self.n_ctx = n_ctx
        self.n_vp = n_vp
        self.fusion_hidden = fusion_hidden
        self.tau = tau
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.holdout_fraction = holdout_fraction
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X, self.image_size, self.channels)
        y = check_labels(y, n_samples=len(X))
        self.classes_ = np.unique(y)
        cfg = ModelConfig(
            n_classes=len(self.classes_),
            channels=self.channels,
            image_size=self.image_size,
            patch_size=self.patch_size,
            d_model=self.d_model,
            n_blocks=self.n_blocks,
            n_ctx=self.n_ctx,
            n_vp=self.n_vp,
            fusion_hidden=self.fusion_hidden,
            tau=self.tau,
        )
        train_cfg = PretrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            holdout_fraction=self.holdout_fraction,
        )
        # map labels onto 0..n_classes-1 in classes_ order
        y_idx = np.searchsorted(self.classes_, y)
        self.frozen_, self.prompts_, self.pretrain_meta_ = pretrain_source(
            X, y_idx, cfg, train_cfg, seed=self.random_state
        )
        self.config_ = cfg
        self.holdout_accuracy_ = self.pretrain_meta_["holdout_accuracy"]
        return self

    def predict_proba(self, X):
        self._check_fitted()
        X = check_images(X, self.image_size, self.channels)
        return predict_batch(X, self.prompts_, self.frozen_)

    def predict(self, X):
        self._check_fitted()
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def save(self, path) -> None:
        self._check_fitted()
        meta = dict(self.pretrain_meta_)
        meta["classes"] = self.classes_.tolist()
        ckpt.save_model(path, self.frozen_, self.prompts_, meta)

    @classmethod
    def load(cls, path) -> "DualEncoderClassifier":
        frozen, prompts, meta = ckpt.load_model(path)
        cfg = frozen.cfg
        est = cls(
            image_size=cfg.image_size,
            channels=cfg.channels,
            patch_size=cfg.patch_size,
            d_model=cfg.d_model,
            n_blocks=cfg.n_blocks,
            n_ctx=cfg.n_ctx,
            n_vp=cfg.n_vp,
            fusion_hidden=cfg.fusion_hidden,
            tau=cfg.tau,
            random_state=meta.get("seed", 0),
        )
        est.frozen_ = frozen
        est.prompts_ = prompts
        est.pretrain_meta_ = meta
        est.config_ = cfg
        est.holdout_accuracy_ = meta.get("holdout_accuracy")
        est.classes_ = np.asarray(meta.get("classes", list(range(cfg.n_classes))))
        return est

    def _check_fitted(self) -> None:
        if not hasattr(self, "frozen_"):
            raise NotFittedError("DualEncoderClassifier is not fitted; call fit or load")


class TestTimeClassifier(BaseEstimator, ClassifierMixin):
    """Per-sample test-time adaptation around a fitted DualEncoderClassifier.

    `method` selects the adaptation scheme: zero_shot, tpt, metatpt,
    one_stage, or offline. fit() only validates the wrapped base; all
    learning happens episodically inside predict.
    """

    __test__ = False  # keep pytest from collecting this as a test class

    def __init__(
        self,
        base=None,
        method="metatpt",
        n_views=64,
        inner_steps=1,
        outer_steps=1,
        inner_lr=1e-4,
        outer_lr=1e-3,
        ema_momentum=0.9,
        rho=0.1,
        lambda_k=1.0,
        lambda_v=1.0,
        optimizer="adamw",
        offline_steps=5,
        random_state=0,
    ):
        self.base = base
        self.method = method
        self.n_views = n_views
        self.inner_steps = inner_steps
        self.outer_steps = outer_steps
        self.inner_lr = inner_lr
        self.outer_lr = outer_lr
        self.ema_momentum = ema_momentum
        self.rho = rho
        self.lambda_k = lambda_k
        self.lambda_v = lambda_v
        self.optimizer = optimizer
        self.offline_steps = offline_steps
        self.random_state = random_state

    def fit(self, X=None, y=None):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        frozen, prompts, classes = self._resolve_base()
        self.frozen_ = frozen
        self.prompts0_ = prompts
        self.classes_ = classes
        self.adapt_config_ = self._adapt_config()
        return self

    def predict(self, X):
        outcomes = self.predict_outcomes(X)
        return self.classes_[np.array([o.adapted_label for o in outcomes])]

    def predict_outcomes(self, X) -> list[AdaptOutcome]:
        """Full per-sample adaptation records (labels, losses, counters)."""
        self._check_fitted()
        cfg = self.frozen_.cfg
        X = check_images(X, cfg.image_size, cfg.channels)
        acfg = self.adapt_config_
        if self.method == "offline":
            return offline_ablation(X, self.prompts0_, self.frozen_, acfg)
        return [
            run_method(
                self.method,
                X[i],
                self.prompts0_,
                self.frozen_,
                acfg,
                derive_sample_seed(self.random_state, i),
            )
            for i in range(len(X))
        ]

    def _adapt_config(self) -> AdaptConfig:
        return AdaptConfig(
            n_views=self.n_views,
            inner_steps=self.inner_steps,
            outer_steps=self.outer_steps,
            inner_lr=self.inner_lr,
            outer_lr=self.outer_lr,
            ema_momentum=self.ema_momentum,
            rho=self.rho,
            lambda_k=self.lambda_k,
            lambda_v=self.lambda_v,
            optimizer=self.optimizer,
            offline_steps=self.offline_steps,
            seed=self.random_state,
            flags=LossFlags(),
        )

    def _resolve_base(self) -> tuple[FrozenModel, PromptState, np.ndarray]:
        base = self.base
        if isinstance(base, (str,)) or hasattr(base, "__fspath__"):
            base = DualEncoderClassifier.load(base)
        if isinstance(base, DualEncoderClassifier):
            base._check_fitted()
            return base.frozen_, base.prompts_, base.classes_
        raise ValueError("base must be a fitted DualEncoderClassifier or a checkpoint path")

    def _check_fitted(self) -> None:
        if not hasattr(self, "frozen_"):
            raise NotFittedError("TestTimeClassifier is not fitted; call fit first")
