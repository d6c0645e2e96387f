"""scikit-learn compatible wrappers.

``VonMisesFeatureMap`` embeds angles; ``SpatialDescriptor`` turns feature
tensors into l2-normalized descriptors and learns its head with ``fit``.
Both work inside :class:`sklearn.pipeline.Pipeline` and support
``get_params``/``set_params``/``clone``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from .aggregation import HEAD_VARIANTS, DescriptorHead, describe_batch, encode_batch
from .backend import random_orthogonal_init
from .evaluation import normalize_rows
from .featuremap import build_feature_map_spec, embed
from .learning import TrainConfig, train_head

__all__ = ["SpatialDescriptor", "VonMisesFeatureMap"]


class VonMisesFeatureMap(TransformerMixin, BaseEstimator):
    """Explicit feature map of the normalized Von Mises kernel.

    Parameters
    ----------
    kappa : float, default=8.0
        Concentration; lower values give a wider kernel.
    s : int, default=2
        Number of frequencies. Output has ``2 * s + 1`` columns.
    """

    def __init__(self, kappa=8.0, s=2):
        self.kappa = kappa
        self.s = s

    def fit(self, X=None, y=None):
        self.spec_ = build_feature_map_spec(self.kappa, self.s)
        self.coefficients_ = np.asarray(self.spec_.u)
        self.n_features_out_ = self.spec_.dim
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        angles = check_array(X, ensure_2d=False, dtype=np.float64).reshape(-1)
        return embed(self.spec_, angles)


def _check_tensors(X, channels=None):
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] != X.shape[2]:
        raise ValueError(f"expected feature tensors of shape (n_samples, n, n, channels), got {X.shape}")
    if channels is not None and X.shape[3] != channels:
        raise ValueError(f"expected {channels} channels, got {X.shape[3]}")
    return X


class SpatialDescriptor(TransformerMixin, BaseEstimator):
    """Kernelized descriptor with explicit Cartesian/polar position encoding.

    ``X`` holds feature tensors of shape ``(n_samples, n, n, d)``. For
    ``variant="combined"`` the last axis is ``2d``: the channels of the
    network feeding the cartesian block, then those of the polar one. The
    grid side ``n`` may differ between ``fit`` and ``transform``; the head
    parameters do not depend on it.

    ``fit`` trains ``(M, m)`` with hardest-in-batch triplet loss over pairs of
    samples sharing a label. ``n_epochs=0`` keeps the orthogonal init.
    """

    def __init__(self, variant="combined", s=2, kappa=8.0, n_components=128, weighted=True,
                 n_epochs=10, batch_pairs=16, learning_rate=10.0, momentum=0.9,
                 weight_decay=1e-4, random_state=None):
        self.variant = variant
        self.s = s
        self.kappa = kappa
        self.n_components = n_components
        self.weighted = weighted
        self.n_epochs = n_epochs
        self.batch_pairs = batch_pairs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _init_head(self, channels, rng):
        if self.variant not in HEAD_VARIANTS:
            raise ValueError(f"variant must be one of {HEAD_VARIANTS}, got {self.variant!r}")
        blocks = 2 if self.variant == "combined" else 1
        if channels % blocks:
            raise ValueError("combined variant needs an even channel count (two stacked networks)")
        d = channels // blocks
        E = blocks * d * (2 * self.s + 1) ** 2
        M = random_orthogonal_init((self.n_components, E), rng.randint(2**31 - 1))
        return DescriptorHead(self.variant, M, np.zeros(self.n_components), d=d, s=self.s,
                              kappas=self.kappa, weighted=self.weighted)

    def fit(self, X, y=None):
        X = _check_tensors(X)
        rng = check_random_state(self.random_state)
        self.head_ = self._init_head(X.shape[3], rng)
        self.n_channels_ = X.shape[3]
        self.loss_trace_ = []
        if self.n_epochs > 0:
            if y is None:
                raise ValueError("training needs labels; pass n_epochs=0 for an untrained head")
            config = TrainConfig(variant=self.variant, s=self.s, kappa=self.kappa,
                                 D=self.n_components, weighted=self.weighted, epochs=self.n_epochs,
                                 batch_pairs=self.batch_pairs, lr=self.learning_rate,
                                 momentum=self.momentum, weight_decay=self.weight_decay)
            Z = self.encode(X)
            train_rng = np.random.default_rng(rng.randint(2**31 - 1))
            self.loss_trace_ = train_head(self.head_, Z, np.asarray(y), X.shape[1], config, train_rng)
        return self

    def encode(self, X):
        """Aggregated position encodings ``vec(Phi^T F)`` before the head."""
        check_is_fitted(self, "head_")
        X = _check_tensors(X, self.n_channels_)
        return encode_batch(self.head_.tables(X.shape[1]), X)

    def transform(self, X):
        check_is_fitted(self, "head_")
        X = _check_tensors(X, self.n_channels_)
        return normalize_rows(describe_batch(self.head_, X))

    @property
    def n_parameters_(self) -> int:
        check_is_fitted(self, "head_")
        return self.head_.n_params
