"""Command-line entry point: generate, train, verify, sweep, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from ..algorithms import AlgoConfig, read_checkpoint
from ..algorithms.model import CheckpointError
from ..scm import ConfigError, DatasetFormatError, build_scm
from .config import load_config, load_grid
from .runner import HarnessError, generate, load_domains, report, run_single, sweep
from .verify import verify_checkpoint, verify_subspace_marginals

log = logging.getLogger("dglab")


def _parse_params(pairs: list[str]) -> dict:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigError(f"--param expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k] = yaml.safe_load(v)
    return out


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    manifest = generate(cfg, args.out, args.seed)
    print(f"wrote {len(manifest['files'])} datasets to {args.out} (config {manifest['config_hash'][:12]})")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.target is not None:
        if args.target in cfg.train_domains:
            cfg.train_domains = [e for e in cfg.scm.domain_ids if e != args.target]
        cfg.target = args.target
    params = {**cfg.algo_defaults, **_parse_params(args.param), "variant": args.algo, "seed": args.seed}
    algo = AlgoConfig.from_dict(params)
    rep = run_single(cfg, algo, args.data or cfg.data_dir, args.out, verify=args.verify)
    tgt = rep.metric("target", "final")
    acc = f"{tgt['accuracy']:.4f}" if tgt else "n/a"
    print(f"{rep.run_id}: status={rep.status} target_accuracy={acc} ({rep.wall_clock:.1f}s)")
    if rep.status != "ok":
        print(rep.error, file=sys.stderr)
        return 3
    return 0


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise HarnessError(f"checkpoint {ckpt} not found")
    bundle, _ = read_checkpoint(ckpt)
    data = load_domains(args.data or cfg.data_dir, cfg.all_domains, build_scm(cfg.scm))
    train_sets = [data[e] for e in cfg.train_domains]
    records = verify_checkpoint(bundle, train_sets, [data[e] for e in cfg.all_domains], cfg.verify.get("quantizer_M"))
    marg = verify_subspace_marginals([data[e] for e in cfg.all_domains], int(cfg.verify.get("resolution", 10_000)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{ckpt.stem}.bounds.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
        fh.write(json.dumps({"tag": "5.1.iii", **marg.to_dict()}, sort_keys=True) + "\n")
    bad = [r for r in records if not r.satisfied]
    print(f"{len(records) - len(bad)}/{len(records)} inequalities satisfied; subspace marginals d={marg.max_distance:.3g} (bound on d^2: {marg.epsilon:.3g})")
    for r in bad:
        print(f"VIOLATION {r.tag} lhs={r.lhs:.6g} rhs={r.rhs:.6g} {r.context}", file=sys.stderr)
    if not marg.within_bound:
        print(f"VIOLATION 5.1.iii max distance {marg.max_distance:.6g}", file=sys.stderr)
    return 1 if bad or not marg.within_bound else 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    cells = load_grid(args.grid)
    results = sweep(cfg, cells, args.data or cfg.data_dir, args.out, verify=args.verify)
    failed = [r for r in results if r["status"] != "ok"]
    print(f"{len(results) - len(failed)}/{len(results)} runs ok; summary in {Path(args.out) / 'summary.csv'}")
    return 0


def cmd_report(args) -> int:
    summary = report(args.in_dir)
    sys.stdout.write(summary.text)
    return 1 if summary.violations else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dglab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample one dataset file per domain")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one variant with one seed")
    t.add_argument("--config", required=True)
    t.add_argument("--algo", required=True)
    t.add_argument("--target", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--data", default=None, help="dataset directory (default: config data.dir)")
    t.add_argument("--param", action="append", metavar="KEY=VALUE", help="algorithm option override")
    t.add_argument("--verify", action="store_true", help="also record bound checks in the report")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="check the bound inequalities on a checkpoint")
    v.add_argument("--config", required=True)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--data", default=None)
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("sweep", help="run a grid of (variant, params, seeds)")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--data", default=None)
    s.add_argument("--verify", action="store_true")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="aggregate run reports; nonzero exit on any violated bound")
    r.add_argument("--in", dest="in_dir", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetFormatError, CheckpointError, HarnessError, FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
