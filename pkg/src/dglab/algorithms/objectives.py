"""Per-variant training objectives built on the autodiff graph."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .. import diffgraph as dg
from ..divergence import DEFAULT_EPS
from ..prototypes import PrototypeSet, projection_loss, subspace_of
from .model import ModelBundle

VARIANTS = ("ERM", "IRM", "VREX", "IB_ERM", "DANN", "CDANN", "AUG_ERM", "SRA")
ADVERSARIAL = {"DANN": "none", "CDANN": "class", "SRA": "subspace"}


class MissingComponent(ValueError):
    pass


@dataclass
class AlgoConfig:
    variant: str = "ERM"
    lam_penalty: float = 1.0  # IRM / VREx / IB weight
    lam_D: float = 1.0
    lam_P: float = 1.0
    aug_fraction: float = 1.0  # AUG_ERM: share of each batch replaced by counterfactuals
    eps_sinkhorn: float = DEFAULT_EPS
    sinkhorn_iters: int = 200
    grl_lambda: float = 1.0
    grl_ramp: bool = False
    balance_conditional: bool = True  # reweight L_D by 1 / P(cond | domain)
    prior_momentum: float = 0.95  # EMA of per-domain prototype-cell frequencies
    steps: int = 2000
    batch_size: int = 32
    swad_window: float = 0.5
    lr: float = 1e-3
    lr_disc: float | None = None  # discriminator learning rate; None shares lr
    d_steps: int = 0  # extra discriminator-only updates per step
    weight_decay: float = 0.0  # L2 on weight matrices
    d_z: int = 16
    hidden: tuple[int, ...] = (64, 64)
    disc_hidden: int = 64
    per_class_prototypes: int = 16
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        self.variant = self.variant.upper()
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("lam_penalty", "lam_D", "lam_P", "grl_lambda"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 < self.swad_window <= 1.0:
            raise ValueError("swad_window must lie in (0, 1]")
        if not 0.0 <= self.aug_fraction <= 1.0:
            raise ValueError("aug_fraction must lie in [0, 1]")
        self.hidden = tuple(int(h) for h in self.hidden)

    @classmethod
    def from_dict(cls, d: dict) -> "AlgoConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown algorithm options {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Minibatch:
    domain: int  # position among the training domains (discriminator label)
    x: np.ndarray
    y: np.ndarray


@dataclass
class ObjectiveTerms:
    total: dg.Node
    parts: dict[str, float] = field(default_factory=dict)


def _check_nonempty(batches: Sequence[Minibatch]) -> None:
    if not batches:
        raise ValueError("need at least one minibatch")
    for b in batches:
        if len(b.y) == 0:
            raise ValueError(f"empty minibatch for domain {b.domain}")


def _forward(bundle: ModelBundle, batches: Sequence[Minibatch]):
    zs = [bundle.encode(dg.constant(b.x)) for b in batches]
    logits = [bundle.classify(z) for z in zs]
    return zs, logits


def _sum_nodes(nodes: Sequence[dg.Node]) -> dg.Node:
    total = nodes[0]
    for n in nodes[1:]:
        total = dg.add(total, n)
    return total


def domain_risks(logits: Sequence[dg.Node], batches: Sequence[Minibatch]) -> list[dg.Node]:
    return [dg.softmax_cross_entropy(lg, b.y) for lg, b in zip(logits, batches)]


def erm_loss(bundle: ModelBundle, batches: Sequence[Minibatch]) -> dg.Node:
    """Sum over training domains of the mean cross-entropy."""
    _check_nonempty(batches)
    _, logits = _forward(bundle, batches)
    return _sum_nodes(domain_risks(logits, batches))


def irm_penalty_from_logits(logits: Sequence[dg.Node], batches: Sequence[Minibatch]) -> dg.Node:
    """Sum over domains of (d risk(w * logits) / dw at w = 1)^2.

    For cross-entropy that derivative is ``mean_i sum_c (p_ic - onehot_ic) logit_ic``,
    written out so the penalty stays first-order differentiable.
    """
    terms = []
    for lg, b in zip(logits, batches):
        onehot = np.eye(lg.shape[1])[b.y]
        resid = dg.sub(dg.softmax(lg), onehot)
        grad_w = dg.mean(dg.sum(dg.mul(resid, lg), axis=1))
        terms.append(dg.square(grad_w))
    return _sum_nodes(terms)


def irm_penalty(bundle: ModelBundle, batches: Sequence[Minibatch]) -> dg.Node:
    _check_nonempty(batches)
    _, logits = _forward(bundle, batches)
    return irm_penalty_from_logits(logits, batches)


def vrex_penalty(risks: Sequence[dg.Node]) -> dg.Node:
    """Population variance of the per-domain risks."""
    if len(risks) < 2:
        raise ValueError("VREx needs at least two domains")
    mu = dg.mul(_sum_nodes(list(risks)), 1.0 / len(risks))
    return dg.mul(_sum_nodes([dg.square(dg.sub(r, mu)) for r in risks]), 1.0 / len(risks))


def ib_penalty(z: dg.Node) -> dg.Node:
    """Mean over feature dimensions of the batch variance."""
    if z.shape[0] < 2:
        raise ValueError("IB penalty needs at least two rows")
    centred = dg.sub(z, dg.mean(z, axis=0))
    return dg.mean(dg.square(centred))


def nearest_prototype_index(z: np.ndarray, protos: np.ndarray) -> np.ndarray:
    ps = PrototypeSet(protos, np.full(protos.shape[0], 1.0 / protos.shape[0]))
    return subspace_of(z, None, ps)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)


def conditioning_index(bundle: ModelBundle, batches: Sequence[Minibatch], z: np.ndarray, conditioning: str) -> np.ndarray | None:
    """Per-row discrete condition: the label (class) or the nearest prototype (subspace)."""
    if conditioning == "class":
        return np.concatenate([b.y for b in batches])
    if conditioning == "subspace":
        if "protos" not in bundle.store:
            raise MissingComponent("subspace conditioning needs prototypes")
        return nearest_prototype_index(z, bundle.store["protos"].value)
    return None


def balance_weights(domains: np.ndarray, cond: np.ndarray, prior: np.ndarray) -> np.ndarray:
    """``1 / P(cond | domain)`` so every domain carries equal mass within each condition.

    The conditional discriminator then cannot profit from ``P(cond | e)``
    differing across domains, only from ``P(z | cond, e)`` differing.
    """
    return 1.0 / np.maximum(prior[domains, cond], 1e-12)


def adversarial_loss(
    bundle: ModelBundle,
    batches: Sequence[Minibatch],
    conditioning: str = "none",
    grl_lambda: float = 1.0,
    zs: Sequence[dg.Node] | None = None,
    cond_prior: np.ndarray | None = None,
) -> dg.Node:
    """Domain cross-entropy of the discriminator on ``[R(z), cond]``, pooled over domains.

    ``cond`` is nothing, the one-hot label, or the nearest prototype vector
    (held constant). The reversal makes the encoder ascend this loss.
    ``cond_prior[d, s]`` (estimated ``P(cond = s | domain d)``) switches on
    :func:`balance_weights`.
    """
    _check_nonempty(batches)
    if len({b.domain for b in batches}) < 2:
        raise ValueError("adversarial alignment needs at least two domains")
    if conditioning not in ("none", "class", "subspace"):
        raise ValueError(f"unknown conditioning {conditioning!r}")
    if zs is None:
        zs, _ = _forward(bundle, batches)
    z = dg.concat_rows(list(zs))
    inp = dg.grad_reverse(z, grl_lambda)
    cond = conditioning_index(bundle, batches, z.value, conditioning)
    if conditioning == "class":
        inp = dg.concat_cols(inp, np.eye(bundle.arch.C)[cond])
    elif conditioning == "subspace":
        inp = dg.concat_cols(inp, _unit(bundle.store["protos"].value)[cond])
    labels = np.concatenate([np.full(len(b.y), b.domain) for b in batches])
    weights = None
    if cond_prior is not None and cond is not None:
        weights = balance_weights(labels, cond, cond_prior)
    return dg.softmax_cross_entropy(bundle.discriminate(inp), labels, weights)


def grl_schedule(cfg: AlgoConfig, step: int) -> float:
    if not cfg.grl_ramp or cfg.steps <= 0:
        return cfg.grl_lambda
    p = step / cfg.steps
    return cfg.grl_lambda * (2.0 / (1.0 + np.exp(-10.0 * p)) - 1.0)


def total_objective(
    cfg: AlgoConfig,
    bundle: ModelBundle,
    batches: Sequence[Minibatch],
    step: int = 0,
    cond_prior: np.ndarray | None = None,
) -> ObjectiveTerms:
    """Variant objective. AUG_ERM batches must already be augmented by the caller."""
    _check_nonempty(batches)
    v = cfg.variant
    zs, logits = _forward(bundle, batches)
    risks = domain_risks(logits, batches)
    l_h = _sum_nodes(risks)
    parts = {"L_H": l_h.item()}
    total = l_h
    if v == "IRM":
        pen = irm_penalty_from_logits(logits, batches)
        parts["penalty"] = pen.item()
        total = dg.add(total, dg.mul(pen, cfg.lam_penalty))
    elif v == "VREX":
        pen = vrex_penalty(risks)
        parts["penalty"] = pen.item()
        total = dg.add(total, dg.mul(pen, cfg.lam_penalty))
    elif v == "IB_ERM":
        pen = dg.mul(_sum_nodes([ib_penalty(z) for z in zs]), 1.0 / len(zs))
        parts["penalty"] = pen.item()
        total = dg.add(total, dg.mul(pen, cfg.lam_penalty))
    elif v in ADVERSARIAL:
        if v == "SRA":
            if "protos" not in bundle.store:
                raise MissingComponent("SRA needs prototypes")
            protos = bundle.prototypes
            l_p, _ = projection_loss(zs, protos, bundle.store["protos"], cfg.eps_sinkhorn, cfg.sinkhorn_iters)
            parts["L_P"] = l_p.item()
            total = dg.add(total, dg.mul(l_p, cfg.lam_P))
        l_d = adversarial_loss(bundle, batches, ADVERSARIAL[v], grl_schedule(cfg, step), zs, cond_prior)
        parts["L_D"] = l_d.item()
        total = dg.add(total, dg.mul(l_d, cfg.lam_D))
    parts["total"] = total.item()
    return ObjectiveTerms(total, parts)


__all__ = [
    "VARIANTS",
    "AlgoConfig",
    "Minibatch",
    "ObjectiveTerms",
    "MissingComponent",
    "erm_loss",
    "irm_penalty",
    "vrex_penalty",
    "ib_penalty",
    "adversarial_loss",
    "total_objective",
]
