"""Shared training loop, tail weight averaging."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .. import diffgraph as dg
from ..scm import SCM, DomainDataset, augment_dataset
from .model import Architecture, ModelBundle
from .objectives import ADVERSARIAL, AlgoConfig, Minibatch, MissingComponent, adversarial_loss, nearest_prototype_index, total_objective


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, parts: dict):
        super().__init__(f"non-finite objective at step {step}: {parts}")
        self.step = step
        self.parts = parts


class LeakageError(RuntimeError):
    """The held-out target domain reached the training loop."""


class WeightAverage:
    """Running parameter sums over the averaging window."""

    def __init__(self):
        self.sums: dict[str, np.ndarray] | None = None
        self.count = 0
        self.active = False

    def accumulate(self, values: Mapping[str, np.ndarray]) -> None:
        self.active = True
        if self.sums is None:
            self.sums = {k: np.array(v, dtype=float, copy=True) for k, v in values.items()}
        else:
            if set(values) != set(self.sums):
                raise KeyError("parameter names changed between accumulations")
            for k, v in values.items():
                self.sums[k] += v
        self.count += 1


def swad_average(wa: WeightAverage) -> dict[str, np.ndarray]:
    if wa.count < 1 or wa.sums is None:
        raise ValueError("weight average is empty")
    return {k: s / wa.count for k, s in wa.sums.items()}


@dataclass
class RunHistory:
    records: list[dict] = field(default_factory=list)  # {"step": t, <objective parts>}
    batch_sources: set[int] = field(default_factory=set)
    train_domains: list[int] = field(default_factory=list)
    average_start: int = 0
    average_count: int = 0

    def column(self, key: str) -> np.ndarray:
        return np.array([r.get(key, np.nan) for r in self.records], dtype=float)


@dataclass
class TrainResult:
    final: ModelBundle
    averaged: ModelBundle
    history: RunHistory


def architecture_for(cfg: AlgoConfig, d_x: int, C: int, n_domains: int) -> Architecture:
    return Architecture(
        d_x=d_x,
        C=C,
        n_domains=n_domains,
        d_z=cfg.d_z,
        hidden=cfg.hidden,
        disc_hidden=cfg.disc_hidden,
        conditioning=ADVERSARIAL.get(cfg.variant, "none"),
        n_prototypes=C * cfg.per_class_prototypes if cfg.variant == "SRA" else 0,
    )


def _sample_batches(
    cfg: AlgoConfig,
    order: list[int],
    datasets: Mapping[int, DomainDataset],
    rng: np.random.Generator,
    scm: SCM | None,
    history: RunHistory,
) -> list[Minibatch]:
    out = []
    for pos, e in enumerate(order):
        ds = datasets[e]
        idx = rng.integers(0, ds.n, size=cfg.batch_size)
        x, y = ds.x[idx], ds.y[idx]
        if cfg.variant == "AUG_ERM" and cfg.aug_fraction > 0:
            n_aug = int(round(cfg.aug_fraction * cfg.batch_size))
            if n_aug:
                aug = augment_dataset(scm, ds.subset(idx[:n_aug]), rng)
                x = np.vstack([aug.x, x[n_aug:]])
        history.batch_sources.add(int(ds.e))
        out.append(Minibatch(pos, x, y))
    return out


class ConditionPrior:
    """Estimate of ``P(cond | domain)`` for the balanced conditional discriminator.

    Labels use the exact training-set marginals; prototype cells use an
    exponential moving average of per-batch cell frequencies.
    """

    def __init__(self, cfg: AlgoConfig, bundle: ModelBundle, order: list[int], datasets: Mapping[int, DomainDataset]):
        self.kind = ADVERSARIAL.get(cfg.variant, "none") if cfg.balance_conditional else "none"
        self.momentum = cfg.prior_momentum
        self.table: np.ndarray | None = None
        if self.kind == "class":
            C = bundle.arch.C
            self.table = np.stack([np.bincount(datasets[e].y, minlength=C) / datasets[e].n for e in order])
        elif self.kind == "subspace":
            M = bundle.arch.n_prototypes
            self.table = np.full((len(order), M), 1.0 / M)

    def update(self, bundle: ModelBundle, batches: list[Minibatch]) -> np.ndarray | None:
        if self.kind == "subspace":
            protos = bundle.store["protos"].value
            M = protos.shape[0]
            for b in batches:
                idx = nearest_prototype_index(bundle.features(b.x), protos)
                hist = np.bincount(idx, minlength=M) / len(idx)
                self.table[b.domain] = self.momentum * self.table[b.domain] + (1.0 - self.momentum) * hist
        return self.table


def _discriminator_steps(cfg, bundle, batches, table, disc_names) -> None:
    """Extra discriminator-only updates on the current batch, encoder held fixed."""
    zs = [dg.constant(bundle.features(b.x)) for b in batches]
    lr = cfg.lr if cfg.lr_disc is None else cfg.lr_disc
    for _ in range(cfg.d_steps):
        loss = adversarial_loss(bundle, batches, ADVERSARIAL[cfg.variant], 1.0, zs, table)
        bundle.store.zero_grad()
        dg.backward(loss)
        dg.adam_step(bundle.store, lr=lr, names=disc_names)


def train(
    cfg: AlgoConfig,
    datasets: Mapping[int, DomainDataset],
    scm: SCM | None = None,
    target: int | None = None,
    C: int | None = None,
) -> TrainResult:
    """Run ``cfg.steps`` optimizer steps on per-domain minibatches.

    ``datasets`` maps training domain ids to their data; ``target`` is only
    used to audit that it never supplies a batch. Deterministic given
    ``cfg.seed``.
    """
    order = sorted(datasets)
    if not order:
        raise ValueError("no training domains")
    if target is not None and target in order:
        raise LeakageError(f"target domain {target} is among the training domains")
    if cfg.variant in ADVERSARIAL and len(order) < 2:
        raise ValueError(f"{cfg.variant} needs at least two training domains")
    if cfg.variant == "AUG_ERM" and scm is None:
        raise MissingComponent("AUG_ERM needs the SCM for counterfactual augmentation")
    if C is None:
        C = scm.C if scm is not None else int(max(ds.y.max() for ds in datasets.values())) + 1
    d_x = datasets[order[0]].x.shape[1]
    bundle = ModelBundle(architecture_for(cfg, d_x, C, len(order)), seed=cfg.seed, variant=cfg.variant)
    history = RunHistory(train_domains=list(order))
    rng = np.random.default_rng([cfg.seed, 11])
    T = cfg.steps
    start = min(T, int(math.ceil((1.0 - cfg.swad_window) * T)))
    history.average_start = start
    wa = WeightAverage()
    store = bundle.store
    prior = ConditionPrior(cfg, bundle, order, datasets)
    disc_names = [k for k in store if k.startswith("disc.")]
    gen_names = [k for k in store if not k.startswith("disc.")]
    decay_names = [k for k in store if ".W" in k]
    for t in range(T):
        batches = _sample_batches(cfg, order, datasets, rng, scm, history)
        table = prior.update(bundle, batches)
        if cfg.d_steps and cfg.variant in ADVERSARIAL:
            _discriminator_steps(cfg, bundle, batches, table, disc_names)
        terms = total_objective(cfg, bundle, batches, step=t, cond_prior=table)
        if not np.isfinite(terms.parts["total"]):
            raise TrainingDiverged(t, terms.parts)
        store.zero_grad()
        dg.backward(terms.total)
        store.fill_missing_grads()
        if cfg.weight_decay:
            for name in decay_names:
                store[name].grad = store[name].grad + cfg.weight_decay * store[name].value
        if cfg.lr_disc is None:
            dg.adam_step(store, lr=cfg.lr)
        else:
            dg.adam_step(store, lr=cfg.lr, names=gen_names)
            dg.adam_step(store, lr=cfg.lr_disc, names=disc_names)
        if "protos" in store:
            p = store["protos"]
            p.value = p.value / np.maximum(np.linalg.norm(p.value, axis=1, keepdims=True), 1e-12)
        bundle.step = t + 1
        if t >= start:
            wa.accumulate(store.values())
        if t % cfg.log_every == 0 or t == T - 1:
            history.records.append({"step": t, **terms.parts})
    if target is not None and target in history.batch_sources:
        raise LeakageError(f"target domain {target} supplied a training batch")
    averaged = bundle.clone()
    if wa.count:
        averaged.load_params(swad_average(wa))
    history.average_count = wa.count
    return TrainResult(bundle, averaged, history)
