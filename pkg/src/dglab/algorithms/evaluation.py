"""Metrics for any object exposing ``predict_proba``."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..divergence import hellinger_loss
from ..scm import DomainDataset


@dataclass
class Metrics:
    accuracy: float
    ce_loss: float
    hellinger_loss: float  # nan when the dataset lacks oracle posteriors
    per_class_accuracy: list[float]  # nan for classes absent from the dataset
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model, ds: DomainDataset, C: int | None = None) -> Metrics:
    if ds.n < 1:
        raise ValueError("cannot evaluate on an empty dataset")
    probs = np.asarray(model.predict_proba(ds.x), dtype=float)
    C = probs.shape[1] if C is None else C
    pred = probs.argmax(axis=1)
    correct = pred == ds.y
    ce = float(-np.mean(np.log(np.maximum(probs[np.arange(ds.n), ds.y], 1e-300))))
    if ds.posterior is not None:
        hl = float(np.mean(hellinger_loss(probs, ds.posterior)))
    else:
        hl = float("nan")
    per_class = []
    for c in range(C):
        mask = ds.y == c
        per_class.append(float(correct[mask].mean()) if mask.any() else float("nan"))
    return Metrics(float(correct.mean()), ce, hl, per_class, int(ds.n))
