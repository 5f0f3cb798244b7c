"""Prototype distribution over latent space and Sinkhorn projection onto it."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffgraph as dg
from .divergence import DEFAULT_EPS, DEFAULT_MAX_ITERS, DEFAULT_TOL, cost_matrix, sinkhorn_auto

PER_CLASS_FACTOR = 16


@dataclass
class PrototypeSet:
    vectors: np.ndarray  # M x d_z
    weights: np.ndarray  # pi over the M prototypes

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.vectors.shape[0],):
            raise ValueError("one weight per prototype required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("prototype weights must form a simplex")

    @property
    def M(self) -> int:
        return self.vectors.shape[0]

    def renormalize(self) -> None:
        self.vectors = self.vectors / np.maximum(np.linalg.norm(self.vectors, axis=1, keepdims=True), 1e-12)


def _unit_rows(v: np.ndarray) -> np.ndarray:
    return v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)


def init_prototypes(
    C: int,
    d_z: int,
    seed: int = 0,
    per_class_factor: int = PER_CLASS_FACTOR,
    scheme: str = "random_unit",
    samples: np.ndarray | None = None,
) -> PrototypeSet:
    """``per_class_factor * C`` unit vectors with uniform weights.

    ``sample_init`` picks distinct rows of ``samples`` (e.g. initial encoder
    outputs) and normalises them.
    """
    if d_z < 1:
        raise ValueError("d_z must be >= 1")
    M = per_class_factor * C
    rng = np.random.default_rng(seed)
    if scheme == "random_unit":
        vecs = rng.standard_normal((M, d_z))
    elif scheme == "sample_init":
        if samples is None or len(samples) == 0:
            raise ValueError("sample_init needs samples")
        idx = rng.choice(len(samples), size=M, replace=len(samples) < M)
        vecs = np.asarray(samples, dtype=float)[idx] + 1e-6 * rng.standard_normal((M, d_z))
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return PrototypeSet(_unit_rows(vecs), np.full(M, 1.0 / M))


@dataclass
class Assignment:
    coupling: np.ndarray  # B x M
    hard: np.ndarray  # row argmax
    cost: float
    converged: bool


def _couplings(
    batches: Sequence[np.ndarray], protos: PrototypeSet, eps: float, max_iters: int, tol: float
) -> tuple[list[np.ndarray], list[np.ndarray], bool]:
    """Sinkhorn couplings for several batches, solved together when sizes agree."""
    costs = [cost_matrix(z, protos.vectors, "one_minus_cosine") for z in batches]
    pos = protos.weights > 0
    log_b = np.log(protos.weights[pos])
    ok = True
    sizes = {len(z) for z in batches}
    groups = [list(range(len(batches)))] if len(sizes) == 1 else [[i] for i in range(len(batches))]
    out: list[np.ndarray | None] = [None] * len(batches)
    for grp in groups:
        stack = np.stack([costs[i][:, pos] for i in grp])
        B = stack.shape[1]
        log_a = np.full((len(grp), B), -np.log(B))
        plan, conv, _, _, _ = sinkhorn_auto(stack, log_a, np.broadcast_to(log_b, (len(grp), pos.sum())), eps, max_iters, tol)
        ok = ok and conv
        for j, i in enumerate(grp):
            full = np.zeros((B, protos.M))
            full[:, pos] = plan[j]
            out[i] = full
    plans = [p for p in out if p is not None]
    return plans, costs, ok


def assign(
    z: np.ndarray,
    protos: PrototypeSet,
    eps: float = DEFAULT_EPS,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> Assignment:
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[0] < 1:
        raise ValueError("batch must be nonempty")
    (plan,), (cost,), ok = _couplings([z], protos, eps, max_iters, tol)
    if not ok:
        warnings.warn("sinkhorn assignment did not converge; using last iterate", RuntimeWarning)
    return Assignment(plan, plan.argmax(axis=1), float((plan * cost).sum()), ok)


def cosine_cost_node(z: dg.Node, protos: dg.Node) -> dg.Node:
    """Differentiable ``1 - cos(z_i, m_j)`` matrix."""
    zn = dg.div(z, dg.sqrt(dg.sum(dg.square(z), axis=1) + 1e-12))
    pn = dg.div(protos, dg.sqrt(dg.sum(dg.square(protos), axis=1) + 1e-12))
    return dg.sub(1.0, dg.matmul(zn, dg.transpose(pn)))


def projection_loss(
    batches: Sequence[dg.Node],
    protos: PrototypeSet,
    proto_node: dg.Node | None = None,
    eps: float = DEFAULT_EPS,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> tuple[dg.Node, bool]:
    """Sum over domains of ``<coupling, cost>`` with the couplings held constant.

    Gradients flow through the cosine cost into the encoder outputs and,
    when ``proto_node`` is given, into the prototype vectors.
    """
    if any(b.shape[0] < 1 for b in batches):
        raise ValueError("every domain batch must be nonempty")
    P = proto_node if proto_node is not None else dg.constant(protos.vectors)
    plans, _, ok = _couplings([b.value for b in batches], protos, eps, max_iters, tol)
    total = None
    for z, plan in zip(batches, plans):
        term = dg.sum(dg.mul(cosine_cost_node(z, P), dg.constant(plan)))
        total = term if total is None else dg.add(total, term)
    return total, ok


def subspace_of(x: np.ndarray, encode, protos: PrototypeSet) -> np.ndarray:
    """Nearest prototype of ``encode(x)`` under cosine cost; ties go to the lowest index.

    ``encode=None`` treats ``x`` as already-encoded features.
    """
    z = np.atleast_2d(np.asarray(x if encode is None else encode(x), dtype=float))
    return cost_matrix(z, protos.vectors, "one_minus_cosine").argmin(axis=1)


def empirical_pi(x: np.ndarray, encode, protos: PrototypeSet) -> np.ndarray:
    """Fraction of samples falling in each prototype's region."""
    idx = subspace_of(x, encode, protos)
    if idx.size < 1:
        raise ValueError("dataset must be nonempty")
    return np.bincount(idx, minlength=protos.M) / idx.size
