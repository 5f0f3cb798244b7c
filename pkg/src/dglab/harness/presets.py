"""Built-in SCM presets."""

from __future__ import annotations

import numpy as np

from ..scm import DomainSpec, SCMConfig

C, K, D_C, D_E, D_X = 4, 8, 4, 4, 16

# Component weights per domain: each row lists weight on classes (0, 1, 2, 3),
# split evenly over the two components of each class.
_CLASS_MIX = {
    0: (0.40, 0.40, 0.10, 0.10),
    1: (0.10, 0.10, 0.40, 0.40),
    2: (0.40, 0.10, 0.40, 0.10),
    3: (0.10, 0.40, 0.10, 0.40),
}
_RHO = {0: 0.9, 1: 0.85, 2: 0.95, 3: 0.1}


def _component_weights(class_mix) -> np.ndarray:
    return np.repeat(np.asarray(class_mix, dtype=float) / 2.0, 2)


def _component_means(scale: float, offset: float) -> np.ndarray:
    eye = np.eye(D_C)
    means = []
    for c in range(C):
        other = eye[(c + 1) % D_C]
        means.append(scale * eye[c] + offset * other)
        means.append(scale * eye[c] - offset * other)
    return np.array(means)


def _mixing(seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 101])
    return rng.standard_normal((D_X, D_C + D_E)) / np.sqrt(D_C + D_E)


def _env_means(seed: int) -> dict[int, np.ndarray]:
    rng = np.random.default_rng([seed, 202])
    return {e: 0.5 * rng.standard_normal(D_E) for e in _CLASS_MIX}


def label_coupled_preset(seed: int = 0, **overrides) -> SCMConfig:
    """Default benchmark: 4 domains, label-marginal shift, label-coupled shortcut.

    Training domains carry a strong spurious coupling (rho near 1); domain 3
    reverses it and is the natural held-out target.
    """
    env = _env_means(seed)
    domains = [DomainSpec(e, _component_weights(_CLASS_MIX[e]), env[e], _RHO[e]) for e in sorted(_CLASS_MIX)]
    kw = dict(
        C=C,
        K=K,
        d_c=D_C,
        d_e=D_E,
        d_x=D_X,
        domains=domains,
        component_means=_component_means(1.0, 0.5),
        label_weights=3.0 * np.eye(C, D_C),
        mixing=_mixing(seed),
        sigma_c=0.5,
        sigma_e=0.3,
        sigma_x=0.01,
        tau=1.0,
        delta=1.0,
        mode="label_coupled",
        augment_scheme="full",
    )
    kw.update(overrides)
    return SCMConfig(**kw)


def label_shift_preset(seed: int = 0, **overrides) -> SCMConfig:
    """Same domains with the spurious shortcut removed: only ``P(Z_c)`` and ``nu_e`` shift."""
    kw = dict(mode="graph_faithful")
    kw.update(overrides)
    return label_coupled_preset(seed, **kw)


def low_temperature_preset(seed: int = 0, **overrides) -> SCMConfig:
    """Near-deterministic labels: tau tiny, components far from class boundaries."""
    kw = dict(
        component_means=_component_means(2.0, 0.5),
        sigma_c=0.1,
        tau=1e-4,
        sigma_x=0.0,
    )
    kw.update(overrides)
    return label_shift_preset(seed, **kw)


PRESETS = {
    "label_coupled": label_coupled_preset,
    "label_shift": label_shift_preset,
    "low_temperature": low_temperature_preset,
}
