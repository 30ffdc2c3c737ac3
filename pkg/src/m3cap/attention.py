"""Temporal soft attention over per-frame features, keyed by a memory read.

A zero "blank" row is appended to the frames before scoring, so the weight
left on real frames can fall below one.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParameterStore, glorot


@dataclass
class FeatureSequence:
    """``n x d`` frame features with a 0/1 validity mask; masked rows are zero."""

    features: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"features must be a non-empty n x d matrix, got {self.features.shape}")
        if self.mask is None:
            self.mask = np.ones(self.n)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.mask.shape != (self.n,):
            raise ValueError(f"mask shape {self.mask.shape} does not match {self.n} frames")
        if np.any(self.features[self.mask == 0] != 0):
            raise ValueError("masked-out frames must be all zeros")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other):
        return (isinstance(other, FeatureSequence)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.mask, other.mask))


@dataclass
class AttentionResult:
    alpha: Tensor    # n + 1 weights, blank last
    context: Tensor  # d-vector

    @property
    def real_mass(self) -> float:
        return float(self.alpha.data[:-1].sum())


def add_params(store: ParameterStore, rng: np.random.Generator, width: int,
               read_width: int, feat_width: int) -> None:
    store.add("att.W_r", glorot(rng, width, read_width))
    store.add("att.U", glorot(rng, width, feat_width))
    store.add("att.b", np.zeros(width))
    store.add("att.w", glorot(rng, 1, width)[0])


def _with_blank(feats: FeatureSequence) -> tuple[np.ndarray, np.ndarray]:
    rows = np.vstack([feats.features, np.zeros((1, feats.d))])
    valid = np.append(feats.mask > 0, True)
    return rows, valid


def relevance_scores(read_vec, feats: FeatureSequence, store: ParameterStore) -> Tensor:
    """One score per frame plus the blank; masked frames score ``MASK_SCORE``."""
    if not np.any(feats.mask > 0):
        raise ValueError("relevance_scores: every frame is masked")
    rows, valid = _with_blank(feats)
    query = store["att.W_r"] @ read_vec + store["att.b"]
    hidden = ad.tanh(ad.matmul(rows, ad.transpose(store["att.U"])) + query)
    scores = hidden @ store["att.w"]
    if valid.all():
        return scores
    return scores + np.where(valid, 0.0, ad.MASK_SCORE)


def attend(feats: FeatureSequence, read_vec, store: ParameterStore) -> AttentionResult:
    scores = relevance_scores(read_vec, feats, store)
    _, valid = _with_blank(feats)
    alpha = ad.softmax(scores, mask=valid)
    context = ad.matmul(alpha[: feats.n], feats.features)
    return AttentionResult(alpha, context)
