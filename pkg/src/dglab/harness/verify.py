"""Bound checks on trained checkpoints and on the oracle subspace projector."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..algorithms.model import ModelBundle
from ..divergence import BOUND_SLACK, BoundRecord, bound_lower, bound_subspace, bound_upper, hellinger_dist
from ..scm import DomainDataset
from .quantize import pipeline_for


@dataclass
class SubspaceMarginalReport:
    resolution: int
    max_distance: float  # Hellinger distance d
    epsilon: float  # quantization bound 2C / R on the divergence D = d^2
    n_subspaces: int
    worst: dict = field(default_factory=dict)  # domains and cell of the max

    @property
    def within_bound(self) -> bool:
        return self.max_distance**2 <= self.epsilon + BOUND_SLACK

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "max_distance": self.max_distance,
            "epsilon": self.epsilon,
            "within_bound": self.within_bound,
            "n_subspaces": self.n_subspaces,
            "worst": self.worst,
        }


def posterior_grid_cells(post: np.ndarray, R: int) -> np.ndarray:
    """Integer id of the width-1/R grid cell containing each simplex point."""
    q = np.minimum(np.floor(post * R), R - 1).astype(np.int64)
    _, ids = np.unique(q, axis=0, return_inverse=True)
    return ids.reshape(-1)


def verify_subspace_marginals(
    datasets: Sequence[DomainDataset],
    resolution: int = 10_000,
    projector: Callable[[DomainDataset], np.ndarray] | None = None,
) -> SubspaceMarginalReport:
    """Max pairwise Hellinger distance between within-subspace label marginals.

    Two posteriors in one cell differ by at most ``1/R`` per class, and
    ``(sqrt p - sqrt q)^2 <= |p - q|``, so the divergence is at most ``2C/R``.

    Subspaces come from gridding the oracle posterior at width ``1/resolution``
    unless ``projector`` maps each dataset to its own cell ids (e.g. a
    random classifier as a negative control). Label marginals are mean
    oracle posteriors of the samples in the cell.
    """
    if not datasets:
        raise ValueError("need at least one dataset")
    C = datasets[0].posterior.shape[1]
    if projector is None:
        pooled = np.vstack([ds.posterior for ds in datasets])
        ids = posterior_grid_cells(pooled, resolution)
        cuts = np.cumsum([0] + [ds.n for ds in datasets])
        cells = [ids[a:b] for a, b in zip(cuts[:-1], cuts[1:])]
    else:
        cells = [np.asarray(projector(ds), dtype=np.int64) for ds in datasets]
    n_cells = int(max(c.max() for c in cells)) + 1
    marg: list[dict[int, np.ndarray]] = []
    for ds, c in zip(datasets, cells):
        sums = np.zeros((n_cells, C))
        np.add.at(sums, c, ds.posterior)
        cnt = np.bincount(c, minlength=n_cells)
        marg.append({m: sums[m] / cnt[m] for m in np.flatnonzero(cnt)})
    worst = 0.0
    where: dict = {}
    for i, j in itertools.combinations(range(len(datasets)), 2):
        for m in marg[i].keys() & marg[j].keys():
            d = float(hellinger_dist(marg[i][m] / marg[i][m].sum(), marg[j][m] / marg[j][m].sum()))
            if d > worst:
                worst = d
                where = {"e": datasets[i].e, "f": datasets[j].e, "cell": int(m)}
    return SubspaceMarginalReport(resolution, worst, 2.0 * C / resolution, n_cells, where)


def random_projector(d_x: int, C: int, seed: int = 0) -> Callable[[DomainDataset], np.ndarray]:
    """Argmax of a random linear map of ``x``: cells unrelated to the labeling."""
    W = np.random.default_rng([seed, 404]).standard_normal((d_x, C))
    return lambda ds: (ds.x @ W).argmax(axis=1)


def verify_checkpoint(
    bundle: ModelBundle,
    train_sets: Sequence[DomainDataset],
    eval_sets: Sequence[DomainDataset],
    quantizer_M: int | None = None,
    seed: int = 0,
    tolerance: float = BOUND_SLACK,
) -> list[BoundRecord]:
    """Lower, upper and subspace bounds for every pair of ``eval_sets``.

    The quantized head is fitted on ``train_sets`` only.
    """
    f_q = pipeline_for(bundle, train_sets, M=quantizer_M, seed=seed)
    records: list[BoundRecord] = []
    for a, b in itertools.combinations(eval_sets, 2):
        records.append(bound_lower(f_q, a, b, tolerance))
    for a, b in itertools.permutations(eval_sets, 2):
        records.append(bound_upper(f_q, a, b, tolerance=tolerance))
    sub = bound_subspace(f_q, list(eval_sets), tolerance=tolerance)
    records.append(sub.total)
    records.extend(sub.per_subspace)
    return records
