"""Quantized pipelines for trained checkpoints."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.cluster.vq import kmeans2

from ..algorithms.model import ModelBundle
from ..divergence import QuantizedPipeline, fit_quantized_head, quantize_encoder
from ..scm import DomainDataset


def kmeans_prototypes(z: np.ndarray, M: int, seed: int = 0) -> np.ndarray:
    """k-means++ centroids of ``z``; empty clusters are reseeded from data points."""
    z = np.asarray(z, dtype=float)
    if len(z) < M:
        raise ValueError(f"need at least {M} points for {M} clusters")
    rng = np.random.default_rng([seed, 303])
    centroids, labels = kmeans2(z, M, minit="++", seed=rng, iter=50)
    empty = np.setdiff1d(np.arange(M), labels)
    if empty.size:
        centroids[empty] = z[rng.choice(len(z), size=empty.size, replace=False)]
    return centroids


def pipeline_for(
    bundle: ModelBundle,
    train_sets: Sequence[DomainDataset],
    M: int | None = None,
    seed: int = 0,
    use_model_prototypes: bool = True,
) -> QuantizedPipeline:
    """Quantize ``bundle``'s encoder and fit the frequency head on ``train_sets``.

    Bundles that carry prototypes use them under cosine cost; others (or
    ``use_model_prototypes=False``) get ``M`` k-means centroids of the pooled
    training representations under squared Euclidean cost. ``M`` defaults to C.
    """
    if use_model_prototypes and bundle.prototypes is not None:
        g_q = quantize_encoder(bundle.features, bundle.prototypes.vectors, "one_minus_cosine")
    else:
        M = bundle.arch.C if M is None else M
        z = np.vstack([bundle.features(ds.x) for ds in train_sets])
        g_q = quantize_encoder(bundle.features, kmeans_prototypes(z, M, seed), "sq_euclidean")
    return fit_quantized_head(g_q, list(train_sets))
