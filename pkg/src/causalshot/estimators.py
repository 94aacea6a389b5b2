"""scikit-learn style wrappers around the causality, pooling and one-shot model."""
from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from . import backbone, bdc, causality, data
from .config import RunConfig
from .episodes import EpisodeSampler, label_of, map_labels
from .model import CausalBDCNet, MetaLearner

log = logging.getLogger(__name__)


def _check_maps(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, ensure_min_features=1, dtype=np.float64)
    if X.ndim != 4:
        raise ValueError(f"expected [B, k, n, n] feature maps, got shape {X.shape}")
    return X


class CausalityEnhancer(TransformerMixin, BaseEstimator):
    """Turn ``[B, k, n, n]`` maps into the ``2k``-channel enhanced set.

    ``variant`` is ``mulcat``/``mulcatbool`` (factors from each image's own
    causality map) or an ``ablation-*`` variant (one random factor vector
    drawn at fit time from ``random_state``).
    """

    def __init__(self, variant="mulcat", method="max", p=None, random_state=0):
        self.variant = variant
        self.method = method
        self.p = p
        self.random_state = random_state

    def fit(self, X, y=None):
        X = _check_maps(X)
        if self.variant not in causality.VARIANTS or self.variant == "none":
            raise ValueError(f"variant must be a causality or ablation variant, got {self.variant!r}")
        self.n_features_in_ = X.shape[1]
        self.method_ = None
        self.ablation_factors_ = None
        if self.variant.startswith("ablation-"):
            mode = self.variant.split("-", 1)[1]
            self.ablation_factors_ = causality.ablation_factors(self.n_features_in_, mode, self.random_state)
        else:
            self.method_ = causality.CausalityMethod(self.method, self.p)
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = _check_maps(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"fitted on {self.n_features_in_} maps, got {X.shape[1]}")
        out, cmap, factors = causality.enhance(ad.Tensor(X), self.variant, self.method_, self.ablation_factors_)
        self.last_causality_map_ = None if cmap is None else cmap.data
        self.last_factors_ = factors
        return out.data


class BDCPooling(TransformerMixin, BaseEstimator):
    """Flattened BDC matrix per sample, ``[B, c*c]``."""

    def __init__(self, unit_norm=False):
        self.unit_norm = unit_norm

    def fit(self, X, y=None):
        X = _check_maps(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = _check_maps(X)
        mats = bdc.bdc_matrix(ad.Tensor(X))
        if self.unit_norm:
            mats = bdc.unit_frobenius(mats)
        return mats.data.reshape(len(X), -1)


class CausalOneShotClassifier(ClassifierMixin, BaseEstimator):
    """Episodically meta-trained BDC prototype classifier.

    ``fit(X, y, groups)`` meta-trains on ``[N, S, S]`` images with Gleason
    labels ``y`` (strings such as ``"3+4"``); ``groups`` gives patient ids
    and a ``val_fraction`` of patients is held out for checkpoint selection.
    Prediction needs a labelled support set from :meth:`set_support`, which
    may use any label space (for example ``LG``/``HG``).
    """

    def __init__(self, experiment="2way", causality="none", method=None, p=None, preset="desk",
                 lr=1e-2, epochs=100, train_tasks=600, val_tasks=100, val_fraction=0.15, random_state=0):
        self.experiment = experiment
        self.causality = causality
        self.method = method
        self.p = p
        self.preset = preset
        self.lr = lr
        self.epochs = epochs
        self.train_tasks = train_tasks
        self.val_tasks = val_tasks
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _config(self) -> RunConfig:
        return RunConfig(experiment=self.experiment, causality=self.causality, method=self.method, p=self.p,
                         seed=self.random_state, preset=self.preset, lr=self.lr, epochs=self.epochs,
                         train_tasks=self.train_tasks, val_tasks=self.val_tasks)

    def _images(self, X) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float64)
        size = backbone.preset(self.preset).input_size
        if X.ndim != 3 or X.shape[1:] != (size, size):
            raise ValueError(f"expected [N, {size}, {size}] images, got {X.shape}")
        return X

    def fit(self, X, y, groups=None):
        cfg = self._config()
        X = self._images(X)
        y = np.asarray(y).astype(str)
        if len(y) != len(X):
            raise ValueError("X and y differ in length")
        groups = np.arange(len(X)).astype(str) if groups is None else np.asarray(groups).astype(str)
        pool = [data.LabeledImage(pixels=x, gs_label=lab, patient_id=g, image_id=f"fit-{i:05d}")
                for i, (x, lab, g) in enumerate(zip(X, y, groups))]
        # hold out patients per validation label so every val class is present
        rng = np.random.default_rng(self.random_state)
        strata: dict = {}
        for im in pool:
            strata.setdefault(label_of(im, cfg.experiment, "val"), set()).add(im.patient_id)
        held = set()
        for key in sorted(strata, key=str):
            pats = sorted(strata[key] - held)
            n = min(len(pats) - 1, max(1, int(round(self.val_fraction * len(pats))))) if self.val_fraction > 0 else 0
            held.update(rng.choice(pats, size=n, replace=False) if n > 0 else [])
        for im in pool:
            im.subset = "val" if im.patient_id in held else "train"
        self.net_ = CausalBDCNet(backbone.preset(cfg.preset), cfg.causality, cfg.causality_method, seed=cfg.seed)
        val_tasks = cfg.val_tasks if held else 0
        if val_tasks:
            try:
                EpisodeSampler(pool, cfg.experiment, "val")
            except ValueError as exc:
                log.warning("no validation episodes (%s); keeping the last epoch", exc)
                val_tasks = 0
        learner = MetaLearner(self.net_, cfg.experiment, cfg.pesg, tasks_per_epoch=cfg.tasks_per_epoch,
                              val_tasks=val_tasks, seed=cfg.seed)
        learner.fit(pool)
        self.best_val_ = None if learner.best is None else learner.best[0]
        self.training_label_space_ = map_labels(cfg.experiment, "train")
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def set_support(self, X, y):
        """Fix the prototypes: one mean BDC matrix per label in ``y``."""
        check_is_fitted(self, "net_")
        X = self._images(X)
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        mats = self.net_.embed(X[:, None])
        self.prototypes_ = np.stack([mats[y == c].mean(axis=0) for c in self.classes_])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "prototypes_")
        mats = self.net_.embed(self._images(X)[:, None])
        return np.einsum("qij,nij->qn", mats, self.prototypes_)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
