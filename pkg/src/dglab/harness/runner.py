"""Dataset generation, single runs, sweeps and report aggregation."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from ..algorithms import AlgoConfig, evaluate, train, write_checkpoint
from ..algorithms.training import TrainingDiverged
from ..divergence import BoundRecord
from ..scm import SCM, DomainDataset, build_scm, oracle_posterior, read_dataset, sample_domain, write_dataset
from .config import ExperimentConfig, GridCell
from .verify import verify_checkpoint

log = logging.getLogger(__name__)

CSV_FIELDS = [
    "run_id",
    "variant",
    "seed",
    "target_domain",
    "step/final",
    "split",
    "accuracy",
    "ce_loss",
    "hellinger_loss",
    "L_P",
    "L_D",
    "penalty",
    "swad_accuracy",
]
WORKERS_ENV = "DGLAB_WORKERS"
MANIFEST = "manifest.json"


class HarnessError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data


def dataset_path(data_dir: Path, e: int) -> Path:
    return Path(data_dir) / f"domain_{e}.txt"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def generate(cfg: ExperimentConfig, out: str | Path, seed: int | None = None) -> dict:
    """Write one dataset file per SCM domain plus a manifest pinning config hash and seed."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.data_seed if seed is None else seed
    scm = build_scm(cfg.scm)
    files = {}
    for e in cfg.scm.domain_ids:
        path = dataset_path(out, e)
        write_dataset(sample_domain(scm, e, cfg.n_per_domain, seed), path, cfg.scm.C)
        files[str(e)] = {"file": path.name, "sha256": _sha256(path)}
    manifest = {"config_hash": cfg.config_hash(), "seed": seed, "n_per_domain": cfg.n_per_domain, "files": files}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_domains(data_dir: str | Path, ids: Iterable[int], scm: SCM) -> dict[int, DomainDataset]:
    """Read dataset files and attach oracle posteriors recomputed from the stored ``z_c``."""
    out = {}
    for e in ids:
        path = dataset_path(Path(data_dir), e)
        if not path.exists():
            raise HarnessError(f"missing dataset {path}; run 'generate' first")
        ds, C = read_dataset(path)
        if C != scm.C or ds.z_c.shape[1] != scm.config.d_c:
            raise HarnessError(f"{path}: dimensions do not match the configured SCM")
        ds.posterior = oracle_posterior(scm, ds.z_c)
        out[e] = ds
    return out


def ensure_data(cfg: ExperimentConfig, data_dir: str | Path) -> None:
    """Generate the datasets unless a manifest with the same config hash exists."""
    mpath = Path(data_dir) / MANIFEST
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
        if manifest.get("config_hash") == cfg.config_hash() and manifest.get("seed") == cfg.data_seed:
            return
    generate(cfg, data_dir)


# ---------------------------------------------------------------------------
# single run


@dataclass
class RunReport:
    run_id: str
    variant: str
    seed: int
    target: int
    params: dict
    history: list[dict] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)  # {"domain", "split", "kind", ...}
    bounds: list[BoundRecord] = field(default_factory=list)
    wall_clock: float = 0.0
    status: str = "ok"
    error: str | None = None

    def lines(self) -> list[dict]:
        head = {
            "type": "run",
            "run_id": self.run_id,
            "variant": self.variant,
            "seed": self.seed,
            "target": self.target,
            "params": self.params,
            "wall_clock": self.wall_clock,
            "status": self.status,
            "error": self.error,
        }
        out = [head]
        out += [{"type": "history", **h} for h in self.history]
        out += [{"type": "metrics", **m} for m in self.metrics]
        out += [{"type": "bound", **b.to_dict()} for b in self.bounds]
        return out

    def write(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(json.dumps(line, sort_keys=True, default=_json_default) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "RunReport":
        rows = [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]
        if not rows or rows[0].get("type") != "run":
            raise HarnessError(f"{path}: not a run report")
        h = rows[0]
        rep = cls(h["run_id"], h["variant"], h["seed"], h["target"], h["params"], wall_clock=h["wall_clock"], status=h["status"], error=h["error"])
        for r in rows[1:]:
            kind = r.pop("type")
            if kind == "history":
                rep.history.append(r)
            elif kind == "metrics":
                rep.metrics.append(r)
            elif kind == "bound":
                r.pop("satisfied")
                rep.bounds.append(BoundRecord.from_dict(r))
        return rep

    def metric(self, split: str, kind: str = "final", domain: int | None = None) -> dict | None:
        for m in self.metrics:
            if m["split"] == split and m["kind"] == kind and (domain is None or m["domain"] == domain):
                return m
        return None


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o)}")


def run_id_for(algo: AlgoConfig, target: int) -> str:
    params = {k: v for k, v in algo.to_dict().items() if k != "seed"}
    digest = hashlib.sha256(json.dumps(params, sort_keys=True, default=_json_default).encode()).hexdigest()[:8]
    return f"{algo.variant}-t{target}-s{algo.seed}-{digest}"


def _last(history: list[dict], key: str):
    for rec in reversed(history):
        if key in rec:
            return rec[key]
    return None


def csv_row(rep: RunReport) -> dict:
    """The target-domain, final-iterate row of ``rep`` in the fixed CSV schema."""
    fin = rep.metric("target", "final") or {}
    avg = rep.metric("target", "averaged") or {}
    blank = lambda v: "" if v is None else v
    return {
        "run_id": rep.run_id,
        "variant": rep.variant,
        "seed": rep.seed,
        "target_domain": rep.target,
        "step/final": "final",
        "split": "target",
        "accuracy": blank(fin.get("accuracy")),
        "ce_loss": blank(fin.get("ce_loss")),
        "hellinger_loss": blank(fin.get("hellinger_loss")),
        "L_P": blank(_last(rep.history, "L_P")),
        "L_D": blank(_last(rep.history, "L_D")),
        "penalty": blank(_last(rep.history, "penalty")),
        "swad_accuracy": blank(avg.get("accuracy")),
    }


def append_csv(path: str | Path, rows: Iterable[dict]) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow(r)


def run_single(
    cfg: ExperimentConfig,
    algo: AlgoConfig,
    data_dir: str | Path,
    out: str | Path,
    verify: bool = False,
    csv_name: str | None = "metrics.csv",
) -> RunReport:
    """Train one (variant, seed) on the training domains and evaluate on all domains.

    Writes both checkpoints, the JSONL report and (optionally) one CSV row.
    A non-finite loss is recorded in the report instead of raised.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    scm = build_scm(cfg.scm)
    datasets = load_domains(data_dir, cfg.all_domains, scm)
    train_sets = {e: datasets[e] for e in cfg.train_domains}
    rid = run_id_for(algo, cfg.target)
    rep = RunReport(rid, algo.variant, algo.seed, cfg.target, algo.to_dict())
    t0 = time.perf_counter()
    try:
        result = train(algo, train_sets, scm, target=cfg.target, C=cfg.scm.C)
    except TrainingDiverged as exc:
        rep.status, rep.error = "diverged", str(exc)
        rep.wall_clock = time.perf_counter() - t0
        rep.write(out / f"{rid}.report.jsonl")
        if csv_name:
            append_csv(out / csv_name, [csv_row(rep)])
        return rep
    rep.history = result.history.records
    for kind, bundle in (("final", result.final), ("averaged", result.averaged)):
        write_checkpoint(bundle, out / f"{rid}.{kind}.ckpt", kind)
        for e in cfg.all_domains:
            m = evaluate(bundle, datasets[e], cfg.scm.C)
            split = "target" if e == cfg.target else "train"
            rep.metrics.append({"domain": e, "split": split, "kind": kind, **m.to_dict()})
    if verify:
        rep.bounds = verify_checkpoint(
            result.final,
            list(train_sets.values()),
            [datasets[e] for e in cfg.all_domains],
            quantizer_M=cfg.verify.get("quantizer_M"),
            seed=algo.seed,
        )
    rep.wall_clock = time.perf_counter() - t0
    rep.write(out / f"{rid}.report.jsonl")
    if csv_name:
        append_csv(out / csv_name, [csv_row(rep)])
    return rep


# ---------------------------------------------------------------------------
# sweep


def _cell_job(args) -> dict:
    cfg, cell_id, algo, data_dir, out, verify = args
    try:
        rep = run_single(cfg, algo, data_dir, out, verify=verify, csv_name=None)
        return {"cell": cell_id, "row": csv_row(rep), "status": rep.status, "error": rep.error}
    except Exception as exc:  # a failing cell must not sink the sweep
        log.exception("cell %s seed %s failed", cell_id, algo.seed)
        return {"cell": cell_id, "row": None, "status": "failed", "error": f"{type(exc).__name__}: {exc}", "seed": algo.seed}


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise HarnessError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, n)


def sweep(
    cfg: ExperimentConfig,
    cells: list[GridCell],
    data_dir: str | Path,
    out: str | Path,
    verify: bool = False,
) -> list[dict]:
    """Run every (cell, seed); write runs.csv (one row per run) and summary.csv."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for cell in cells:
        for seed in cell.seeds if cell.seeds is not None else cfg.seeds:
            jobs.append((cfg, cell.id, cell.algo_config(cfg.algo_defaults, seed), str(data_dir), str(out), verify))
    n = worker_count()
    if n == 1:
        results = [_cell_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_cell_job, jobs))
    rows = [dict(r["row"], cell_id=r["cell"]) for r in results if r["row"] is not None]
    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["cell_id", *CSV_FIELDS])
        w.writeheader()
        w.writerows(rows)
    summary = summarize(rows, results, cells)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        w.writerows(summary)
    return results


SUMMARY_FIELDS = [
    "cell_id",
    "variant",
    "n_runs",
    "n_failed",
    "accuracy_mean",
    "accuracy_std",
    "hellinger_loss_mean",
    "hellinger_loss_std",
    "swad_accuracy_mean",
    "swad_accuracy_std",
]


def _mean_std(values: list) -> tuple:
    v = np.array([float(x) for x in values if x != ""], dtype=float)
    if v.size == 0:
        return "", ""
    return float(v.mean()), float(v.std())


def summarize(rows: list[dict], results: list[dict], cells: list[GridCell]) -> list[dict]:
    out = []
    for cell in cells:
        mine = [r for r in rows if r["cell_id"] == cell.id and r["accuracy"] != ""]
        failed = sum(1 for r in results if r["cell"] == cell.id and r["status"] != "ok")
        acc = _mean_std([r["accuracy"] for r in mine])
        hl = _mean_std([r["hellinger_loss"] for r in mine])
        sw = _mean_std([r["swad_accuracy"] for r in mine])
        out.append(
            {
                "cell_id": cell.id,
                "variant": cell.variant,
                "n_runs": len(mine),
                "n_failed": failed,
                "accuracy_mean": acc[0],
                "accuracy_std": acc[1],
                "hellinger_loss_mean": hl[0],
                "hellinger_loss_std": hl[1],
                "swad_accuracy_mean": sw[0],
                "swad_accuracy_std": sw[1],
            }
        )
    return out


# ---------------------------------------------------------------------------
# report


@dataclass
class ReportSummary:
    n_runs: int
    n_bounds: int
    violations: list[dict]
    text: str


def report(in_dir: str | Path) -> ReportSummary:
    """Aggregate every ``*.report.jsonl`` under ``in_dir`` into report_runs.csv and report.txt."""
    in_dir = Path(in_dir)
    paths = sorted(in_dir.rglob("*.report.jsonl"))
    if not paths:
        raise HarnessError(f"no run reports under {in_dir}")
    reports = [RunReport.read(p) for p in paths]
    rows = [csv_row(r) for r in reports]
    with open(in_dir / "report_runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        w.writerows(rows)
    tally: dict[str, list[int]] = {}
    violations = []
    for r in reports:
        for b in r.bounds:
            t = tally.setdefault(b.tag, [0, 0])
            t[0] += 1
            if not b.satisfied:
                t[1] += 1
                violations.append({"run_id": r.run_id, **b.to_dict()})
    lines = [f"runs: {len(reports)}"]
    for tag in sorted(tally):
        n, bad = tally[tag]
        lines.append(f"bound {tag}: {n - bad}/{n} satisfied")
    for v in violations:
        lines.append(f"VIOLATION {v['run_id']} {v['tag']} lhs={v['lhs']:.6g} rhs={v['rhs']:.6g} {v['context']}")
    failed = [r.run_id for r in reports if r.status != "ok"]
    if failed:
        lines.append(f"runs not ok: {', '.join(failed)}")
    text = "\n".join(lines) + "\n"
    (in_dir / "report.txt").write_text(text)
    return ReportSummary(len(reports), sum(t[0] for t in tally.values()), violations, text)
