"""Experiment configuration files (YAML, versioned by a ``schema`` field)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from ..algorithms.objectives import AlgoConfig
from ..scm import ConfigError, DomainSpec, SCMConfig
from .presets import PRESETS

SCHEMA_VERSION = 1


@dataclass
class GridCell:
    id: str
    variant: str
    params: dict[str, Any] = field(default_factory=dict)
    seeds: list[int] | None = None  # None: use the experiment seeds

    def algo_config(self, defaults: dict, seed: int) -> AlgoConfig:
        return AlgoConfig.from_dict({**defaults, **self.params, "variant": self.variant, "seed": seed})


@dataclass
class ExperimentConfig:
    scm: SCMConfig
    scm_spec: dict  # as written in the file, for hashing
    train_domains: list[int]
    target: int
    seeds: list[int]
    data_seed: int = 1
    n_per_domain: int = 4000
    data_dir: str = "data"
    output_dir: str = "runs"
    algo_defaults: dict = field(default_factory=dict)
    grid: list[GridCell] = field(default_factory=list)
    verify: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        ids = self.scm.domain_ids
        if self.target in self.train_domains:
            raise ConfigError(f"target domain {self.target} is also a training domain")
        for e in [*self.train_domains, self.target]:
            if e not in ids:
                raise ConfigError(f"domain {e} is not defined in the SCM (have {ids})")
        if len(set(self.train_domains)) != len(self.train_domains):
            raise ConfigError("duplicate training domains")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        validate_grid(self.grid)

    @property
    def all_domains(self) -> list[int]:
        return sorted([*self.train_domains, self.target])

    def config_hash(self) -> str:
        payload = {"scm": self.scm_spec, "data_seed": self.data_seed, "n_per_domain": self.n_per_domain}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def validate_grid(cells: list[GridCell]) -> None:
    seen: set[str] = set()
    for c in cells:
        if c.id in seen:
            raise ConfigError(f"duplicate grid cell id {c.id!r}")
        seen.add(c.id)
        if c.seeds is not None and not c.seeds:
            raise ConfigError(f"grid cell {c.id!r} has an empty seed list")
        AlgoConfig.from_dict({**c.params, "variant": c.variant})


def _domain_from_dict(d: dict) -> DomainSpec:
    try:
        return DomainSpec(int(d["id"]), np.asarray(d["weights"], dtype=float), np.asarray(d["env_mean"], dtype=float), float(d.get("rho", 0.5)))
    except KeyError as exc:
        raise ConfigError(f"domain entry lacks {exc}") from exc


def scm_from_spec(spec: dict) -> SCMConfig:
    """Build an SCM config from either ``{preset, seed, overrides}`` or explicit fields."""
    spec = dict(spec)
    if "preset" in spec:
        name = spec["preset"]
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        overrides = dict(spec.get("overrides") or {})
        rho = overrides.pop("rho", None)
        cfg = PRESETS[name](int(spec.get("seed", 0)), **overrides)
        if rho is not None:
            # rho: {domain id: coupling}
            for e, value in rho.items():
                cfg.domain(int(e)).rho = float(value)
        if "domains" in spec:
            cfg.domains = [_domain_from_dict(d) for d in spec["domains"]]
    else:
        try:
            fields_ = {k: v for k, v in spec.items() if k != "domains"}
            for k in ("component_means", "label_weights", "mixing"):
                fields_[k] = np.asarray(fields_[k], dtype=float)
            cfg = SCMConfig(domains=[_domain_from_dict(d) for d in spec["domains"]], **fields_)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"incomplete explicit SCM specification: {exc}") from exc
    cfg.validate()
    return cfg


def _grid_from_list(items: list[dict]) -> list[GridCell]:
    cells = []
    for i, it in enumerate(items or []):
        if "variant" not in it:
            raise ConfigError(f"grid entry {i} lacks a variant")
        params = dict(it.get("params") or {})
        cells.append(GridCell(str(it.get("id", it["variant"])), str(it["variant"]), params, it.get("seeds")))
    return cells


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    schema = raw.get("schema")
    if schema != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema {schema!r}; expected {SCHEMA_VERSION}")
    if "scm" not in raw or "experiment" not in raw:
        raise ConfigError("config needs 'scm' and 'experiment' sections")
    exp = raw["experiment"]
    data = raw.get("data") or {}
    try:
        return ExperimentConfig(
            scm=scm_from_spec(raw["scm"]),
            scm_spec=raw["scm"],
            train_domains=[int(e) for e in exp["train_domains"]],
            target=int(exp["target"]),
            seeds=[int(s) for s in exp.get("seeds", [0])],
            data_seed=int(data.get("seed", 1)),
            n_per_domain=int(data.get("n_per_domain", 4000)),
            data_dir=str(data.get("dir", "data")),
            output_dir=str(raw.get("output_dir", "runs")),
            algo_defaults=dict(exp.get("defaults") or {}),
            grid=_grid_from_list(exp.get("grid") or []),
            verify=dict(raw.get("verify") or {}),
            raw=raw,
        )
    except KeyError as exc:
        raise ConfigError(f"experiment section lacks {exc}") from exc


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return parse_config(raw)


def load_grid(path: str | Path) -> list[GridCell]:
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict) or raw.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: grid file needs schema: {SCHEMA_VERSION}")
    cells = _grid_from_list(raw.get("cells") or [])
    if not cells:
        raise ConfigError(f"{path}: grid has no cells")
    validate_grid(cells)
    return cells
