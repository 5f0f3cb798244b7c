"""Synthetic data from a structural causal model.

Each environment ``e`` fixes a mixture over causal components and an
environmental law. A sample is drawn as::

    k   ~ Categorical(pi_e)
    z_c ~ N(mu_k, sigma_c^2 I)
    y   ~ Categorical(softmax(W_y z_c / tau))
    z_e ~ N(nu_e, sigma_e^2 I)                       (graph_faithful)
    z_e ~ N(nu_e +/- delta * embed(y), sigma_e^2 I)  (label_coupled, + w.p. rho_e)
    x   = A [z_c; z_e] + sigma_x * N(0, I)

The label only depends on ``z_c``, so ``P(Y | z_c)`` is identical in every
environment and is exposed as :func:`oracle_posterior`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .diffgraph import softmax_values

MODES = ("graph_faithful", "label_coupled")


class ConfigError(ValueError):
    pass


class IdentifiabilityError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass
class DomainSpec:
    """Per-environment parameters."""

    id: int
    weights: np.ndarray  # pi_e over the K causal components
    env_mean: np.ndarray  # nu_e
    rho: float = 0.5  # spurious coupling strength, label_coupled mode only


@dataclass
class SCMConfig:
    C: int
    K: int
    d_c: int
    d_e: int
    d_x: int
    domains: list[DomainSpec]
    component_means: np.ndarray  # K x d_c
    label_weights: np.ndarray  # C x d_c
    mixing: np.ndarray  # d_x x (d_c + d_e)
    sigma_c: float = 0.5
    sigma_e: float = 0.5
    sigma_x: float = 0.01
    tau: float = 1.0
    delta: float = 1.0
    mode: str = "graph_faithful"
    augment_scheme: str = "full"  # "full" or "domains"

    def domain(self, e: int) -> DomainSpec:
        for d in self.domains:
            if d.id == e:
                return d
        raise KeyError(f"unknown domain id {e}")

    @property
    def domain_ids(self) -> list[int]:
        return [d.id for d in self.domains]

    def validate(self) -> None:
        if self.C < 2:
            raise ConfigError("need at least two classes")
        if self.K < self.C:
            raise ConfigError(f"K={self.K} must be >= C={self.C}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.augment_scheme not in ("full", "domains"):
            raise ConfigError(f"unknown augment_scheme {self.augment_scheme!r}")
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        for name in ("sigma_c", "sigma_e", "sigma_x"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        ids = self.domain_ids
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate domain ids in {ids}")
        shapes = {
            "component_means": (self.K, self.d_c),
            "label_weights": (self.C, self.d_c),
            "mixing": (self.d_x, self.d_c + self.d_e),
        }
        for name, shape in shapes.items():
            if np.shape(getattr(self, name)) != shape:
                raise ConfigError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")
        for d in self.domains:
            w = np.asarray(d.weights, dtype=float)
            if w.shape != (self.K,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ConfigError(f"domain {d.id}: weights must be a simplex vector of length {self.K}")
            if np.shape(d.env_mean) != (self.d_e,):
                raise ConfigError(f"domain {d.id}: env_mean must have length {self.d_e}")
            if not 0.0 <= d.rho <= 1.0:
                raise ConfigError(f"domain {d.id}: rho must lie in [0, 1]")


@dataclass(frozen=True)
class LabeledSample:
    x: np.ndarray
    y: int
    z_c: np.ndarray
    z_e: np.ndarray
    e: int
    k: int


@dataclass
class DomainDataset:
    """All samples of one environment, stored column-wise."""

    e: int
    x: np.ndarray
    y: np.ndarray
    z_c: np.ndarray
    z_e: np.ndarray
    k: np.ndarray
    posterior: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.y)

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.x[i], int(self.y[i]), self.z_c[i], self.z_e[i], self.e, int(self.k[i]))

    def __iter__(self) -> Iterator[LabeledSample]:
        return (self[i] for i in range(self.n))

    def label_marginal(self, C: int) -> np.ndarray:
        return np.bincount(self.y, minlength=C) / self.n

    def subset(self, idx) -> "DomainDataset":
        post = None if self.posterior is None else self.posterior[idx]
        return DomainDataset(self.e, self.x[idx], self.y[idx], self.z_c[idx], self.z_e[idx], self.k[idx], post)


class SCM:
    def __init__(self, config: SCMConfig):
        self.config = config
        self.A = np.asarray(config.mixing, dtype=float)
        self._pinv = np.linalg.pinv(self.A)
        self._embed = np.zeros((config.C, config.d_e))
        for c in range(config.C):
            self._embed[c, c % config.d_e] = 1.0

    @property
    def C(self) -> int:
        return self.config.C

    def label_embed(self, y: np.ndarray) -> np.ndarray:
        return self._embed[np.asarray(y, dtype=np.int64)]

    def mix(self, z_c: np.ndarray, z_e: np.ndarray, noise: np.ndarray | None = None) -> np.ndarray:
        x = np.hstack([z_c, z_e]) @ self.A.T
        if noise is not None:
            x = x + noise
        return x

    def oracle_posterior(self, z_c: np.ndarray) -> np.ndarray:
        return oracle_posterior(self, z_c)

    def sample_env_latent(self, dom: DomainSpec, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        cfg = self.config
        n = len(y)
        mean = np.broadcast_to(np.asarray(dom.env_mean, dtype=float), (n, cfg.d_e)).copy()
        if cfg.mode == "label_coupled":
            sign = np.where(rng.random(n) < dom.rho, 1.0, -1.0)
            mean += cfg.delta * sign[:, None] * self.label_embed(y)
        return mean + cfg.sigma_e * rng.standard_normal((n, cfg.d_e))


def build_scm(config: SCMConfig, seed: int | None = None) -> SCM:
    """Validate ``config`` and return an SCM.

    The mixing map must have full column rank; otherwise two latent pairs
    could produce the same noiseless observation.
    """
    config.validate()
    A = np.asarray(config.mixing, dtype=float)
    rank = np.linalg.matrix_rank(A)
    if rank < A.shape[1]:
        raise IdentifiabilityError(f"mixing map has rank {rank} < {A.shape[1]} columns")
    return SCM(config)


def oracle_posterior(scm: SCM, z_c: np.ndarray) -> np.ndarray:
    cfg = scm.config
    z_c = np.atleast_2d(np.asarray(z_c, dtype=float))
    logits = z_c @ np.asarray(cfg.label_weights, dtype=float).T / cfg.tau
    return softmax_values(logits)


def _categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((probs.shape[0], 1))
    idx = (u > cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def sample_domain(scm: SCM, e: int, n: int, seed: int) -> DomainDataset:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    cfg = scm.config
    dom = cfg.domain(e)
    rng = np.random.default_rng([seed, e])
    w = np.asarray(dom.weights, dtype=float)
    k = _categorical(np.broadcast_to(w, (n, cfg.K)), rng)
    z_c = np.asarray(cfg.component_means, dtype=float)[k] + cfg.sigma_c * rng.standard_normal((n, cfg.d_c))
    post = oracle_posterior(scm, z_c)
    y = _categorical(post, rng)
    z_e = scm.sample_env_latent(dom, y, rng)
    noise = cfg.sigma_x * rng.standard_normal((n, cfg.d_x))
    x = scm.mix(z_c, z_e, noise)
    return DomainDataset(e, x, y.astype(np.int64), z_c, z_e, k.astype(np.int64), post)


def oracle_invariant_encoder(scm: SCM, x: np.ndarray) -> np.ndarray:
    """Least-squares inversion of the mixing map, keeping the causal block."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return (x @ scm._pinv.T)[:, : scm.config.d_c]


def counterfactual_augment(scm: SCM, sample: LabeledSample, seed: int) -> LabeledSample:
    """Redraw ``z_e`` and the observation noise with ``z_c`` and ``y`` held fixed."""
    ds = DomainDataset(
        sample.e,
        sample.x[None, :],
        np.array([sample.y]),
        sample.z_c[None, :],
        sample.z_e[None, :],
        np.array([sample.k]),
    )
    return augment_dataset(scm, ds, np.random.default_rng(seed))[0]


def augment_dataset(scm: SCM, ds: DomainDataset, rng: np.random.Generator) -> DomainDataset:
    """Vectorised counterfactual augmentation of every sample in ``ds``.

    ``augment_scheme="domains"`` draws each new ``z_e`` from the law of a
    uniformly chosen configured domain. ``"full"`` draws the environmental
    mean uniformly from the configured ones and, in label_coupled mode, the
    coupling sign with probability 1/2, so ``z_e`` carries no label signal.
    """
    cfg = scm.config
    n = ds.n
    pick = rng.integers(0, len(cfg.domains), size=n)
    means = np.stack([np.asarray(d.env_mean, dtype=float) for d in cfg.domains])[pick]
    if cfg.mode == "label_coupled":
        if cfg.augment_scheme == "domains":
            rho = np.array([d.rho for d in cfg.domains])[pick]
        else:
            rho = np.full(n, 0.5)
        sign = np.where(rng.random(n) < rho, 1.0, -1.0)
        means = means + cfg.delta * sign[:, None] * scm.label_embed(ds.y)
    z_e = means + cfg.sigma_e * rng.standard_normal((n, cfg.d_e))
    noise = cfg.sigma_x * rng.standard_normal((n, cfg.d_x))
    x = scm.mix(ds.z_c, z_e, noise)
    return DomainDataset(ds.e, x, ds.y.copy(), ds.z_c.copy(), z_e, ds.k.copy(), ds.posterior)


@dataclass
class SupportReport:
    passed: bool
    coverage: np.ndarray  # summed component weight over the listed domains
    missing: list[int]


def check_causal_support(scm: SCM, domain_ids: Sequence[int]) -> SupportReport:
    """Every causal component must carry weight in at least one listed domain."""
    cfg = scm.config
    cov = np.zeros(cfg.K)
    for e in domain_ids:
        cov += np.asarray(cfg.domain(e).weights, dtype=float)
    missing = [int(k) for k in np.flatnonzero(cov <= 0)]
    return SupportReport(not missing, cov, missing)


# ---------------------------------------------------------------------------
# text format


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_dataset(ds: DomainDataset, path: str | Path, C: int) -> None:
    d_c, d_e, d_x = ds.z_c.shape[1], ds.z_e.shape[1], ds.x.shape[1]
    lines = [f"dims e={ds.e} n={ds.n} C={C} d_c={d_c} d_e={d_e} d_x={d_x}"]
    for i in range(ds.n):
        vals = [str(int(ds.y[i])), str(int(ds.k[i]))]
        vals += [_fmt(v) for v in ds.z_c[i]]
        vals += [_fmt(v) for v in ds.z_e[i]]
        vals += [_fmt(v) for v in ds.x[i]]
        lines.append(",".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_header(line: str) -> dict[str, int]:
    parts = line.split()
    if not parts or parts[0] != "dims":
        raise DatasetFormatError(f"malformed header: {line!r}")
    try:
        fields = dict(p.split("=", 1) for p in parts[1:])
        out = {key: int(fields[key]) for key in ("e", "n", "C", "d_c", "d_e", "d_x")}
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"malformed header: {line!r}") from exc
    return out


def read_dataset(path: str | Path) -> tuple[DomainDataset, int]:
    """Return the dataset and its class count ``C``."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    h = read_header(lines[0])
    width = 2 + h["d_c"] + h["d_e"] + h["d_x"]
    rows = lines[1:]
    if len(rows) < h["n"]:
        raise DatasetFormatError(f"{path}: truncated at row {len(rows) + 1}, header declares n={h['n']}")
    if len(rows) > h["n"] and any(r.strip() for r in rows[h["n"]:]):
        raise DatasetFormatError(f"{path}: more rows than the header's n={h['n']}")
    data = np.empty((h["n"], width))
    for i, row in enumerate(rows[: h["n"]]):
        cells = row.split(",")
        if len(cells) != width:
            raise DatasetFormatError(f"{path}: row {i + 1} has {len(cells)} fields, header implies {width}")
        try:
            data[i] = [float(c) for c in cells]
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: row {i + 1} is not numeric") from exc
    a, b = 2 + h["d_c"], 2 + h["d_c"] + h["d_e"]
    y = data[:, 0].astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= h["C"]):
        raise DatasetFormatError(f"{path}: label outside [0, {h['C']})")
    ds = DomainDataset(h["e"], data[:, b:], y, data[:, 2:a], data[:, a:b], data[:, 1].astype(np.int64))
    return ds, h["C"]
