"""Ensemble baselines: posterior mean, posterior product and encoder-feature mean."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from . import tensor as T
from .nets import SegModel, forward_decoder, forward_encoder
from .tensor import Tensor, UsageError

log = logging.getLogger(__name__)

ENSEMBLE_KINDS = ("posterior_mean", "posterior_product", "encoder_feature_mean")


def _check(models: Sequence[SegModel]) -> None:
    if not models:
        raise UsageError("an ensemble needs at least one model")


def posterior_mean(models: Sequence[SegModel], x: np.ndarray) -> np.ndarray:
    _check(models)
    acc = np.zeros(0)
    for k, m in enumerate(models):
        y = m.predict(x).astype(np.float64)
        acc = y if k == 0 else acc + y
    return acc / len(models)


def posterior_product(models: Sequence[SegModel], x: np.ndarray) -> np.ndarray:
    """Per-pixel product of member posteriors, renormalised over classes.

    Pixels whose product underflows to all zeros fall back to uniform.
    """
    _check(models)
    prod = None
    for m in models:
        y = m.predict(x).astype(np.float64)
        prod = y if prod is None else prod * y
    return normalize_rows(prod)


def normalize_rows(prod: np.ndarray) -> np.ndarray:
    total = prod.sum(axis=1, keepdims=True)
    dead = total <= 0
    if np.any(dead):
        log.warning("posterior product vanished at %d pixels; using a uniform posterior there", int(dead.sum()))
    s = prod.shape[1]
    return np.where(dead, 1.0 / s, prod / np.where(dead, 1.0, total))


def mean_features(models: Sequence[SegModel], x: np.ndarray) -> list[np.ndarray]:
    """Per-scale average of the member encoder feature maps."""
    _check(models)
    acc: list[np.ndarray] | None = None
    with T.no_grad():
        xt = Tensor(x)
        for m in models:
            feats = [f.data.astype(np.float64) for f in forward_encoder(m, xt)]
            acc = feats if acc is None else [a + f for a, f in zip(acc, feats)]
    return [a / len(models) for a in acc]


def _decode(model: SegModel, feats: list[np.ndarray], out_size) -> np.ndarray:
    with T.no_grad():
        return forward_decoder(model, [Tensor(f) for f in feats], out_size).data


def encoder_feature_mean(models: Sequence[SegModel], x: np.ndarray, decoder_index: int = 1) -> np.ndarray:
    """Averaged encoder features decoded by member ``decoder_index`` (1-based)."""
    if not 1 <= decoder_index <= len(models):
        raise UsageError(f"decoder index {decoder_index} outside 1..{len(models)}")
    feats = mean_features(models, x)
    return _decode(models[decoder_index - 1], feats, x.shape[2:])


def encoder_feature_mean_all(models: Sequence[SegModel], x: np.ndarray) -> list[np.ndarray]:
    """Averaged encoder features decoded by every member decoder (M outputs)."""
    feats = mean_features(models, x)
    return [_decode(m, feats, x.shape[2:]) for m in models]


def ensemble_predict(kind: str, models: Sequence[SegModel], x: np.ndarray) -> list[np.ndarray]:
    """Posteriors for one ensemble kind; a list with one entry per decoder for the feature mean."""
    if kind == "posterior_mean":
        return [posterior_mean(models, x)]
    if kind == "posterior_product":
        return [posterior_product(models, x)]
    if kind == "encoder_feature_mean":
        return encoder_feature_mean_all(models, x)
    raise UsageError(f"unknown ensemble kind {kind!r}; expected one of {ENSEMBLE_KINDS}")
