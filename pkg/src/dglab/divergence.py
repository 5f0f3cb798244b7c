"""Divergences, entropic optimal transport and bound bookkeeping.

Hellinger quantities follow the convention ``D(p, q) = 2 * sum (sqrt p - sqrt q)^2``
(range [0, 4]) and ``d = sqrt(D)`` (range [0, 2]).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffgraph as dg

DEFAULT_EPS = 0.05
DEFAULT_MAX_ITERS = 200
DEFAULT_TOL = 1e-6
BOUND_SLACK = 1e-9
COST_KINDS = ("one_minus_cosine", "sq_euclidean")
# eps-scaling warm start for the log-domain solver
ANNEAL_MIN_RATIO = 2.0
ANNEAL_STAGE_ITERS = 50


class SupportMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# Hellinger


def _check_simplex(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any(p < -1e-12) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError(f"{name} is not a probability vector")
    return np.clip(p, 0.0, None)


def hellinger_sq(p, q) -> float | np.ndarray:
    """``D_{1/2}(p, q)``; works row-wise on 2-D inputs."""
    p = _check_simplex(p, "p")
    q = _check_simplex(q, "q")
    if p.shape[-1] != q.shape[-1]:
        raise SupportMismatch(f"support sizes differ: {p.shape[-1]} vs {q.shape[-1]}")
    out = 2.0 * ((np.sqrt(p) - np.sqrt(q)) ** 2).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def hellinger_dist(p, q) -> float | np.ndarray:
    return np.sqrt(hellinger_sq(p, q))


def hellinger_loss(pred, oracle) -> float | np.ndarray:
    """Per-sample Hellinger loss of a predicted simplex against the true posterior."""
    pred = np.asarray(pred, dtype=float)
    oracle = np.asarray(oracle, dtype=float)
    if pred.shape != oracle.shape:
        raise SupportMismatch(f"shape mismatch {pred.shape} vs {oracle.shape}")
    return hellinger_sq(pred, oracle)


# ---------------------------------------------------------------------------
# entropic optimal transport


@dataclass
class TransportProblem:
    cost: np.ndarray
    a: np.ndarray
    b: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        self.cost = np.asarray(self.cost, dtype=float)
        self.a = _check_simplex(self.a, "a")
        self.b = _check_simplex(self.b, "b")
        if self.cost.shape != (self.a.size, self.b.size):
            raise ValueError(f"cost shape {self.cost.shape} does not match marginals")
        if not np.all(np.isfinite(self.cost)):
            raise ValueError("cost must be finite")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")


@dataclass
class SinkhornResult:
    coupling: np.ndarray
    cost: float
    converged: bool
    iterations: int
    residual: float
    cost_history: list[float] = field(default_factory=list, repr=False)


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _log_sweeps(cost, log_a, log_b, eps, f, g, max_iters, tol, track_cost, history):
    a = np.exp(log_a)
    converged = False
    residual = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        f = eps * (log_a - _logsumexp((g[..., None, :] - cost) / eps, axis=-1))
        g = eps * (log_b - _logsumexp((f[..., :, None] - cost) / eps, axis=-2))
        plan = np.exp((f[..., :, None] + g[..., None, :] - cost) / eps)
        residual = float(np.abs(plan.sum(axis=-1) - a).sum(axis=-1).max())
        if track_cost:
            history.append(float((plan * cost).sum()))
        if residual < tol:
            converged = True
            break
    return f, g, converged, it, residual


def sinkhorn_log(
    cost: np.ndarray,
    log_a: np.ndarray,
    log_b: np.ndarray,
    eps: float,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
    track_cost: bool = False,
    anneal: bool = True,
):
    """Log-domain Sinkhorn on a stack of problems ``cost[..., n, m]``.

    Returns ``(coupling, converged, iterations, residual, cost_history)``;
    the residual is the worst L1 row-marginal error (columns are exact
    after each full sweep). With ``anneal`` and a cost range far above
    ``eps``, the potentials are warm-started by halving a larger ``eps``
    down to the target; ``max_iters`` bounds the final stage only.
    """
    f = np.zeros(cost.shape[:-1])
    g = np.zeros(cost.shape[:-2] + cost.shape[-1:])
    history: list[float] = []
    spent = 0
    if anneal and cost.size:
        stage = float(np.ptp(cost, axis=(-2, -1)).max()) / 2.0
        while stage > ANNEAL_MIN_RATIO * eps:
            f, g, _, it, _ = _log_sweeps(cost, log_a, log_b, stage, f, g, ANNEAL_STAGE_ITERS, tol, False, [])
            spent += it
            stage /= 2.0
    f, g, converged, it, residual = _log_sweeps(cost, log_a, log_b, eps, f, g, max_iters, tol, track_cost, history)
    plan = np.exp((f[..., :, None] + g[..., None, :] - cost) / eps)
    return plan, converged, spent + it, residual, history


# exp(-range / eps) must stay far from float64 underflow for the scaling form
SCALING_MAX_RATIO = 200.0


def sinkhorn_scaling(
    cost: np.ndarray,
    log_a: np.ndarray,
    log_b: np.ndarray,
    eps: float,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
    track_cost: bool = False,
):
    """Multiplicative Sinkhorn with the same contract as :func:`sinkhorn_log`.

    Only safe when ``cost.ptp() / eps`` is moderate; see :func:`sinkhorn_auto`.
    """
    shift = cost.min(axis=(-2, -1), keepdims=True)
    K = np.exp(-(cost - shift) / eps)
    a = np.exp(log_a)
    b = np.exp(log_b)
    v = np.ones(b.shape)
    u = np.ones(a.shape)
    history: list[float] = []
    converged = False
    residual = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        u = a / (K @ v[..., None])[..., 0]
        v = b / (u[..., None, :] @ K)[..., 0, :]
        row = u * (K @ v[..., None])[..., 0]
        residual = float(np.abs(row - a).sum(axis=-1).max())
        if track_cost:
            history.append(float((u[..., :, None] * K * v[..., None, :] * cost).sum()))
        if residual < tol:
            converged = True
            break
    plan = u[..., :, None] * K * v[..., None, :]
    return plan, converged, it, residual, history


def sinkhorn_auto(cost, log_a, log_b, eps, max_iters=DEFAULT_MAX_ITERS, tol=DEFAULT_TOL, track_cost=False):
    """Scaling form when numerically safe, log domain otherwise."""
    ratio = float(np.ptp(cost, axis=(-2, -1)).max()) / eps if cost.size else 0.0
    solver = sinkhorn_scaling if ratio <= SCALING_MAX_RATIO else sinkhorn_log
    plan, ok, it, res, hist = solver(cost, log_a, log_b, eps, max_iters, tol, track_cost)
    if solver is sinkhorn_scaling and not np.all(np.isfinite(plan)):
        return sinkhorn_log(cost, log_a, log_b, eps, max_iters, tol, track_cost)
    return plan, ok, it, res, hist


def sinkhorn(
    prob: TransportProblem,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
    track_cost: bool = False,
) -> SinkhornResult:
    rows = np.flatnonzero(prob.a > 0)
    cols = np.flatnonzero(prob.b > 0)
    sub = prob.cost[np.ix_(rows, cols)]
    plan, ok, iters, res, hist = sinkhorn_auto(
        sub, np.log(prob.a[rows]), np.log(prob.b[cols]), prob.eps, max_iters, tol, track_cost
    )
    if not ok:
        warnings.warn(f"sinkhorn did not converge in {iters} iterations (residual {res:.2e})", RuntimeWarning)
    full = np.zeros_like(prob.cost)
    full[np.ix_(rows, cols)] = plan
    return SinkhornResult(full, float((full * prob.cost).sum()), ok, iters, res, hist)


def cost_matrix(za: np.ndarray, zb: np.ndarray, kind: str = "one_minus_cosine") -> np.ndarray:
    za = np.atleast_2d(np.asarray(za, dtype=float))
    zb = np.atleast_2d(np.asarray(zb, dtype=float))
    if kind == "one_minus_cosine":
        na = za / np.maximum(np.linalg.norm(za, axis=1, keepdims=True), 1e-12)
        nb = zb / np.maximum(np.linalg.norm(zb, axis=1, keepdims=True), 1e-12)
        return 1.0 - na @ nb.T
    if kind == "sq_euclidean":
        d = (za**2).sum(1)[:, None] + (zb**2).sum(1)[None, :] - 2.0 * za @ zb.T
        return np.maximum(d, 0.0)
    raise ValueError(f"unknown cost kind {kind!r}; expected one of {COST_KINDS}")


def wasserstein_empirical(
    za: np.ndarray,
    zb: np.ndarray,
    cost_kind: str = "one_minus_cosine",
    eps: float = DEFAULT_EPS,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> float:
    za = np.atleast_2d(np.asarray(za, dtype=float))
    zb = np.atleast_2d(np.asarray(zb, dtype=float))
    if za.shape[0] == 0 or zb.shape[0] == 0:
        raise ValueError("point sets must be nonempty")
    a = np.full(za.shape[0], 1.0 / za.shape[0])
    b = np.full(zb.shape[0], 1.0 / zb.shape[0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return sinkhorn(TransportProblem(cost_matrix(za, zb, cost_kind), a, b, eps), max_iters, tol).cost


# ---------------------------------------------------------------------------
# H-divergence proxy


@dataclass
class ProbeConfig:
    hidden: int = 32
    steps: int = 200
    lr: float = 1e-2
    train_fraction: float = 0.5


def h_divergence_proxy(za: np.ndarray, zb: np.ndarray, probe: ProbeConfig | None = None, seed: int = 0) -> float:
    """``max(0, 2 * balanced_accuracy - 1)`` of a held-out probe separating the sets."""
    probe = probe or ProbeConfig()
    za = np.atleast_2d(np.asarray(za, dtype=float))
    zb = np.atleast_2d(np.asarray(zb, dtype=float))
    rng = np.random.default_rng(seed)

    def split(z):
        idx = rng.permutation(len(z))
        cut = int(round(probe.train_fraction * len(z)))
        return z[idx[:cut]], z[idx[cut:]]

    tra, tea = split(za)
    trb, teb = split(zb)
    if min(len(tra), len(tea), len(trb), len(teb)) < 1:
        raise ValueError("each set needs at least one train and one held-out point")

    x = np.vstack([tra, trb])
    y = np.r_[np.zeros(len(tra), int), np.ones(len(trb), int)]
    mu, sd = x.mean(0), x.std(0) + 1e-8
    d = x.shape[1]
    store = dg.ParamStore()
    W1 = store.add("W1", rng.standard_normal((d, probe.hidden)) / math.sqrt(d))
    b1 = store.add("b1", np.zeros((1, probe.hidden)))
    W2 = store.add("W2", rng.standard_normal((probe.hidden, 2)) / math.sqrt(probe.hidden))
    b2 = store.add("b2", np.zeros((1, 2)))
    def logits(inp):
        h = dg.relu(dg.affine(dg.constant((inp - mu) / sd), W1, b1))
        return dg.affine(h, W2, b2)

    for _ in range(probe.steps):
        dg.backward(dg.softmax_cross_entropy(logits(x), y))
        dg.adam_step(store, lr=probe.lr)

    def acc(z, label):
        pred = logits(z).value.argmax(axis=1)
        return float((pred == label).mean())

    bal = 0.5 * (acc(tea, 0) + acc(teb, 1))
    return max(0.0, 2.0 * bal - 1.0)


# ---------------------------------------------------------------------------
# quantized pipeline


class QuantizedEncoder:
    """Nearest-prototype discretisation of a continuous encoder."""

    def __init__(self, encode: Callable[[np.ndarray], np.ndarray], prototypes: np.ndarray, cost_kind: str = "one_minus_cosine"):
        self.encode = encode
        self.prototypes = np.atleast_2d(np.asarray(prototypes, dtype=float))
        if self.prototypes.shape[0] < 1:
            raise ValueError("need at least one prototype")
        self.cost_kind = cost_kind

    @property
    def M(self) -> int:
        return self.prototypes.shape[0]

    def index_of_features(self, z: np.ndarray) -> np.ndarray:
        # argmin returns the first minimiser, i.e. ties go to the lowest index
        return cost_matrix(z, self.prototypes, self.cost_kind).argmin(axis=1)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.index_of_features(self.encode(x))


def quantize_encoder(encode, prototypes, cost_kind: str = "one_minus_cosine") -> QuantizedEncoder:
    return QuantizedEncoder(encode, prototypes, cost_kind)


@dataclass
class QuantizedPipeline:
    encoder: QuantizedEncoder
    head: np.ndarray  # M x C, row m = prediction for cell m

    def indices(self, x: np.ndarray) -> np.ndarray:
        return self.encoder(x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.head[self.indices(x)]


def fit_quantized_head(g_q: QuantizedEncoder, datasets: Sequence) -> QuantizedPipeline:
    """Cell prediction = mean oracle posterior of the pooled samples in that cell."""
    C = datasets[0].posterior.shape[1]
    sums = np.zeros((g_q.M, C))
    counts = np.zeros(g_q.M)
    for ds in datasets:
        idx = g_q(ds.x)
        np.add.at(sums, idx, ds.posterior)
        counts += np.bincount(idx, minlength=g_q.M)
    head = np.full((g_q.M, C), 1.0 / C)
    filled = counts > 0
    head[filled] = sums[filled] / counts[filled, None]
    return QuantizedPipeline(g_q, head)


# ---------------------------------------------------------------------------
# bound records


@dataclass
class BoundRecord:
    tag: str
    lhs: float
    rhs_terms: dict[str, float]
    rhs: float
    tolerance: float = BOUND_SLACK
    context: dict = field(default_factory=dict)
    satisfied: bool = field(init=False)

    def __post_init__(self):
        self.satisfied = bool(self.lhs <= self.rhs + self.tolerance)

    def to_dict(self) -> dict:
        return {
            "tag": self.tag,
            "lhs": self.lhs,
            "rhs_terms": dict(self.rhs_terms),
            "rhs": self.rhs,
            "satisfied": self.satisfied,
            "tolerance": self.tolerance,
            "context": dict(self.context),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoundRecord":
        rec = cls(d["tag"], d["lhs"], d["rhs_terms"], d["rhs"], d["tolerance"], d.get("context", {}))
        return rec


@dataclass
class _DomainView:
    """Cell indices, posteriors and per-sample losses of one domain under a pipeline."""

    idx: np.ndarray
    post: np.ndarray
    loss: np.ndarray
    M: int

    @property
    def hist(self) -> np.ndarray:
        return np.bincount(self.idx, minlength=self.M) / len(self.idx)

    def cell_loss(self) -> np.ndarray:
        tot = np.bincount(self.idx, weights=self.loss, minlength=self.M)
        cnt = np.bincount(self.idx, minlength=self.M)
        return np.divide(tot, cnt, out=np.zeros(self.M), where=cnt > 0)


def _view(f_q: QuantizedPipeline, ds) -> _DomainView:
    idx = f_q.indices(ds.x)
    loss = hellinger_sq(f_q.head[idx], ds.posterior)
    return _DomainView(idx, ds.posterior, np.atleast_1d(loss), f_q.encoder.M)


def _label_marginal(post: np.ndarray) -> np.ndarray:
    p = post.mean(axis=0)
    return p / p.sum()


def labeling_shift(p_e: np.ndarray, p_f: np.ndarray, loss_e: np.ndarray, loss_f: np.ndarray) -> float:
    """Excess of domain e's per-cell loss over domain f's, weighted by f's cell mass.

    Zero when every shared cell carries the same conditional loss in both
    domains, i.e. when the labeling is a function of the representation.
    """
    shared = (p_e > 0) & (p_f > 0)
    return float((p_f[shared] * np.maximum(0.0, loss_e[shared] - loss_f[shared])).sum())


def bound_lower(f_q: QuantizedPipeline, ds_e, ds_f, tolerance: float = BOUND_SLACK) -> BoundRecord:
    """d(P_Y^e, P_Y^f) <= L_e^1/2 + d(g#P^e, g#P^f) + L_f^1/2 on the quantized pipeline."""
    ve, vf = _view(f_q, ds_e), _view(f_q, ds_f)
    lhs = float(hellinger_dist(_label_marginal(ve.post), _label_marginal(vf.post)))
    rep = float(hellinger_dist(ve.hist, vf.hist))
    le, lf = float(ve.loss.mean()), float(vf.loss.mean())
    terms = {"sqrt_loss_e": math.sqrt(le), "representation_dist": rep, "sqrt_loss_f": math.sqrt(lf)}
    return BoundRecord("A.8", lhs, terms, sum(terms.values()), tolerance, {"e": ds_e.e, "f": ds_f.e})


def bound_upper(f_q: QuantizedPipeline, ds_e, ds_f, L: float = 4.0, tolerance: float = BOUND_SLACK) -> BoundRecord:
    """L_e <= L_f + L sqrt(2) d(g#P^e, g#P^f) [+ labeling shift] on the quantized pipeline."""
    ve, vf = _view(f_q, ds_e), _view(f_q, ds_f)
    pe, pf = ve.hist, vf.hist
    rep = float(hellinger_dist(pe, pf))
    terms = {
        "loss_f": float(vf.loss.mean()),
        "alignment": L * math.sqrt(2.0) * rep,
        "labeling_shift": labeling_shift(pe, pf, ve.cell_loss(), vf.cell_loss()),
    }
    lhs = float(ve.loss.mean())
    stated = terms["loss_f"] + terms["alignment"]
    ctx = {"e": ds_e.e, "f": ds_f.e, "stated_rhs": stated, "stated_satisfied": bool(lhs <= stated + tolerance)}
    return BoundRecord("A.7", lhs, terms, stated + terms["labeling_shift"], tolerance, ctx)


@dataclass
class SubspaceBounds:
    total: BoundRecord  # (i)
    per_subspace: list[BoundRecord]  # (ii)
    pi: dict[int, np.ndarray]  # domain id -> subspace mixture weights
    decomposition_error: float  # max_e |L_e - sum_m pi_m^e L_m^e|


def bound_subspace(
    f_q: QuantizedPipeline,
    datasets: Sequence,
    subspace_of_cell: np.ndarray | None = None,
    L: float = 4.0,
    tolerance: float = BOUND_SLACK,
) -> SubspaceBounds:
    """Subspace decomposition bounds.

    Subspaces default to the quantizer cells themselves; ``subspace_of_cell``
    maps each cell to a coarser subspace index so the representation can
    still vary inside a subspace. Subspaces empty in one domain of a pair are
    treated as disjoint (representation distance 2).
    """
    M = f_q.encoder.M
    sub_map = np.arange(M) if subspace_of_cell is None else np.asarray(subspace_of_cell, dtype=np.int64)
    S = int(sub_map.max()) + 1
    views = {ds.e: _view(f_q, ds) for ds in datasets}
    ids = list(views)

    parts: dict[int, list[_DomainView | None]] = {}
    pis: dict[int, np.ndarray] = {}
    losses: dict[int, float] = {}
    decomp = 0.0
    for e, v in views.items():
        s = sub_map[v.idx]
        counts = np.bincount(s, minlength=S)
        pis[e] = counts / counts.sum()
        rows = []
        for m in range(S):
            mask = s == m
            rows.append(_DomainView(v.idx[mask], v.post[mask], v.loss[mask], M) if mask.any() else None)
        parts[e] = rows
        losses[e] = float(v.loss.mean())
        recon = sum(pis[e][m] * rows[m].loss.mean() for m in range(S) if rows[m] is not None)
        decomp = max(decomp, abs(losses[e] - recon))

    per_sub: list[BoundRecord] = []
    first = align = lab = 0.0
    for e in ids:
        for f in ids:
            for m in range(S):
                pe = pis[e][m]
                if pe == 0:
                    continue
                ve, vf = parts[e][m], parts[f][m]
                if vf is None:
                    # empty restricted distribution: disjoint, distance 2
                    align += pe * L * math.sqrt(2.0) * 2.0
                    continue
                he, hf = ve.hist, vf.hist
                rep = float(hellinger_dist(he, hf))
                le, lf = float(ve.loss.mean()), float(vf.loss.mean())
                first += pe * lf
                align += pe * L * math.sqrt(2.0) * rep
                lab += pe * labeling_shift(he, hf, ve.cell_loss(), vf.cell_loss())
                if e < f:
                    lhs = float(hellinger_dist(_label_marginal(ve.post), _label_marginal(vf.post)))
                    terms = {"representation_dist": rep, "sqrt_loss_e": math.sqrt(le), "sqrt_loss_f": math.sqrt(lf)}
                    per_sub.append(
                        BoundRecord("5.1.ii", lhs, terms, sum(terms.values()), tolerance, {"e": e, "f": f, "m": m})
                    )

    lhs = len(ids) * sum(losses.values())
    terms = {"subspace_losses": first, "alignment": align, "labeling_shift": lab}
    ctx = {"domains": ids, "subspaces": S, "stated_rhs": first + align,
           "stated_satisfied": bool(lhs <= first + align + tolerance)}
    total = BoundRecord("5.1.i", lhs, terms, first + align + lab, tolerance, ctx)
    return SubspaceBounds(total, per_sub, pis, decomp)
