"""Encoder / classifier / discriminator parameters and their checkpoint format."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import diffgraph as dg
from ..prototypes import PrototypeSet, init_prototypes
from ..scm import SCM, oracle_invariant_encoder, oracle_posterior

CONDITIONING_WIDTH = {"none": lambda C, d_z: 0, "class": lambda C, d_z: C, "subspace": lambda C, d_z: d_z}


@dataclass
class Architecture:
    d_x: int
    C: int
    n_domains: int
    d_z: int = 16
    hidden: tuple[int, ...] = (64, 64)
    disc_hidden: int = 64
    conditioning: str = "none"  # discriminator conditioning: none | class | subspace
    n_prototypes: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.conditioning not in CONDITIONING_WIDTH:
            raise ValueError(f"unknown conditioning {self.conditioning!r}")
        if self.n_prototypes % self.C:
            raise ValueError("n_prototypes must be a multiple of C")

    @property
    def cond_width(self) -> int:
        return CONDITIONING_WIDTH[self.conditioning](self.C, self.d_z)


class ModelBundle:
    """f = h o g plus domain discriminator and optional prototypes."""

    def __init__(self, arch: Architecture, seed: int = 0, variant: str = "ERM"):
        self.arch = arch
        self.variant = variant
        self.step = 0
        self.store = dg.ParamStore()
        rng = np.random.default_rng([seed, 7])
        widths = [arch.d_x, *arch.hidden, arch.d_z]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.store.add(f"enc.W{i}", rng.standard_normal((a, b)) / math.sqrt(a))
            self.store.add(f"enc.b{i}", np.zeros((1, b)))
        self.store.add("cls.W", rng.standard_normal((arch.d_z, arch.C)) / math.sqrt(arch.d_z))
        self.store.add("cls.b", np.zeros((1, arch.C)))
        d_in = arch.d_z + arch.cond_width
        self.store.add("disc.W0", rng.standard_normal((d_in, arch.disc_hidden)) * math.sqrt(2.0 / d_in))
        self.store.add("disc.b0", np.zeros((1, arch.disc_hidden)))
        self.store.add("disc.W1", rng.standard_normal((arch.disc_hidden, arch.n_domains)) / math.sqrt(arch.disc_hidden))
        self.store.add("disc.b1", np.zeros((1, arch.n_domains)))
        if arch.n_prototypes:
            factor = arch.n_prototypes // arch.C
            protos = init_prototypes(arch.C, arch.d_z, seed=int(rng.integers(2**31)), per_class_factor=factor)
            self.store.add("protos", protos.vectors)

    # -- graph builders
    def encode(self, x) -> dg.Node:
        h = x if isinstance(x, dg.Node) else dg.constant(x)
        n = len(self.arch.hidden)
        for i in range(n):
            h = dg.tanh(dg.affine(h, self.store[f"enc.W{i}"], self.store[f"enc.b{i}"]))
        return dg.affine(h, self.store[f"enc.W{n}"], self.store[f"enc.b{n}"])

    def classify(self, z: dg.Node) -> dg.Node:
        return dg.affine(z, self.store["cls.W"], self.store["cls.b"])

    def discriminate(self, inp: dg.Node) -> dg.Node:
        h = dg.relu(dg.affine(inp, self.store["disc.W0"], self.store["disc.b0"]))
        return dg.affine(h, self.store["disc.W1"], self.store["disc.b1"])

    # -- numpy inference
    def features(self, x: np.ndarray) -> np.ndarray:
        return self.encode(dg.constant(x)).value

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return dg.softmax_values(self.classify(dg.constant(self.features(x))).value)

    @property
    def prototypes(self) -> PrototypeSet | None:
        if "protos" not in self.store:
            return None
        v = self.store["protos"].value
        return PrototypeSet(v, np.full(v.shape[0], 1.0 / v.shape[0]))

    def param_values(self) -> dict[str, np.ndarray]:
        return self.store.values()

    def load_params(self, values: dict[str, np.ndarray]) -> None:
        self.store.load(values)

    def clone(self) -> "ModelBundle":
        other = ModelBundle.__new__(ModelBundle)
        other.arch = self.arch
        other.variant = self.variant
        other.step = self.step
        other.store = dg.ParamStore()
        for k, v in self.store.items():
            other.store.add(k, v.value.copy())
        return other


class Ensemble:
    """Arithmetic mean of member predictive distributions."""

    def __init__(self, members):
        members = list(members)
        if not members:
            raise ValueError("ensemble needs at least one member")
        self.members = members

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        probs = [m.predict_proba(x) for m in self.members]
        if len({p.shape[1] for p in probs}) != 1:
            raise ValueError("members disagree on the number of classes")
        return np.mean(probs, axis=0)


def ensemble_predict(bundles, x: np.ndarray) -> np.ndarray:
    return Ensemble(bundles).predict_proba(x)


class OraclePredictor:
    """Invert the mixing map, keep the causal block, apply the true posterior."""

    def __init__(self, scm: SCM):
        self.scm = scm

    def features(self, x: np.ndarray) -> np.ndarray:
        return oracle_invariant_encoder(self.scm, x)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return oracle_posterior(self.scm, self.features(x))


# ---------------------------------------------------------------------------
# checkpoint text format
#
#   checkpoint variant=<V> step=<t> kind=<final|averaged>
#   arch <json-free key=value list>
#   param <name> rows=<r> cols=<c>
#   <r lines of comma-separated 17-digit decimals>


class CheckpointError(ValueError):
    pass


def _fmt_row(row: np.ndarray) -> str:
    return ",".join(format(float(v), ".17g") for v in row)


def write_checkpoint(bundle: ModelBundle, path: str | Path, kind: str = "final") -> None:
    a = asdict(bundle.arch)
    arch_items = " ".join(
        f"{k}={','.join(map(str, v)) if isinstance(v, (tuple, list)) else v}" for k, v in a.items()
    )
    lines = [f"checkpoint variant={bundle.variant} step={bundle.step} kind={kind}", f"arch {arch_items}"]
    for name, node in bundle.store.items():
        r, c = node.shape
        lines.append(f"param {name} rows={r} cols={c}")
        lines.extend(_fmt_row(row) for row in node.value)
    Path(path).write_text("\n".join(lines) + "\n")


def _kv(tokens: list[str]) -> dict[str, str]:
    try:
        return dict(t.split("=", 1) for t in tokens)
    except ValueError as exc:
        raise CheckpointError(f"malformed key=value list: {tokens}") from exc


def read_checkpoint(path: str | Path) -> tuple[ModelBundle, str]:
    """Load a checkpoint; returns the bundle and its kind."""
    lines = Path(path).read_text().splitlines()
    if len(lines) < 2 or not lines[0].startswith("checkpoint ") or not lines[1].startswith("arch "):
        raise CheckpointError(f"{path}: missing checkpoint header")
    head = _kv(lines[0].split()[1:])
    arch_kv = _kv(lines[1].split()[1:])
    try:
        arch = Architecture(
            d_x=int(arch_kv["d_x"]),
            C=int(arch_kv["C"]),
            n_domains=int(arch_kv["n_domains"]),
            d_z=int(arch_kv["d_z"]),
            hidden=tuple(int(h) for h in arch_kv["hidden"].split(",") if h),
            disc_hidden=int(arch_kv["disc_hidden"]),
            conditioning=arch_kv["conditioning"],
            n_prototypes=int(arch_kv["n_prototypes"]),
        )
    except KeyError as exc:
        raise CheckpointError(f"{path}: arch line lacks {exc}") from exc
    bundle = ModelBundle(arch, seed=0, variant=head.get("variant", "ERM"))
    bundle.step = int(head.get("step", 0))
    values: dict[str, np.ndarray] = {}
    i = 2
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        if parts[0] != "param" or len(parts) != 4:
            raise CheckpointError(f"{path}: line {i + 1}: expected a param block header")
        name = parts[1]
        kv = _kv(parts[2:])
        r, c = int(kv["rows"]), int(kv["cols"])
        block = lines[i + 1 : i + 1 + r]
        if len(block) != r:
            raise CheckpointError(f"{path}: param {name} truncated")
        try:
            values[name] = np.array([[float(v) for v in row.split(",")] for row in block])
        except ValueError as exc:
            raise CheckpointError(f"{path}: param {name} has non-numeric entries") from exc
        if values[name].shape != (r, c):
            raise CheckpointError(f"{path}: param {name} has shape {values[name].shape}, header says {(r, c)}")
        i += 1 + r
    missing = set(bundle.store.params) - set(values)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    bundle.load_params(values)
    return bundle, head.get("kind", "final")
