"""Command-line driver: gen-data, train, eval, compare, sweep."""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import config as config_mod
from . import data as data_mod
from . import experiments
from .autodiff.checkpoint import CheckpointError
from .config import ConfigError
from .data import DataError, SyntheticConfig
from .training import TrainingError

EXIT_CODES = {ConfigError: 2, DataError: 3, CheckpointError: 4, TrainingError: 5}


def _parse_data_config(path: str | None) -> SyntheticConfig:
    if path is None:
        return SyntheticConfig()
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(Path(path).read_text())
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read data config {path}: {exc}") from None
    if not cp.has_section("data"):
        raise ConfigError(f"{path}: missing [data] section")
    values = {}
    for key, raw in cp.items("data"):
        raw = raw.strip()
        if raw.lower() == "none":
            values[key] = None
        elif "," in raw:
            values[key] = tuple(float(v) if "." in v else int(v) for v in raw.split(","))
        else:
            try:
                values[key] = int(raw)
            except ValueError:
                values[key] = float(raw)
    try:
        return SyntheticConfig.from_dict(values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _with_seed(cfg, seed):
    return cfg if seed is None else replace(cfg, seed=seed)


def cmd_gen_data(args) -> int:
    cfg = _with_seed(_parse_data_config(args.config), args.seed)
    ds = data_mod.generate(cfg)
    data_mod.save(ds, args.out)
    stats = data_mod.corpus_statistics(ds)
    print(f"wrote {len(ds)} samples to {args.out} (filtered {ds.stats['filtered_empty']} all-empty draws)")
    print(f"label diversity E[d(Y,Y')]: {stats['label_diversity_mean']:.4f}")
    print("rater-agreement buckets: " + ", ".join(f"{k}:{v}" for k, v in stats["bucket_histogram"].items()))
    print("splits: " + ", ".join(f"{k}={v}" for k, v in stats["split_sizes"].items()))
    return 0


def _load_experiment(args):
    cfg = config_mod.load(args.config)
    cfg = _with_seed(cfg, args.seed)
    if getattr(args, "dataset", None):
        cfg = replace(cfg, dataset=args.dataset)
    return cfg.resolved()


def cmd_train(args) -> int:
    cfg = _load_experiment(args)
    out = Path(args.out)
    trained = experiments.run_train(cfg, out)
    for i, (c, e) in enumerate(zip(trained.checksums, trained.best_epochs)):
        print(f"member {i}: best epoch {e}, parameter checksum {c[:16]}")
    print(f"run directory: {out}")
    return 0


def cmd_eval(args) -> int:
    summary = experiments.run_eval(args.run, args.dataset, args.n_samples, args.seed, args.self_eval)
    o = summary["overall"]
    print(f"{summary['family']}: {summary['metric']} median {o['median']:.4f} "
          f"(q1 {o['q1']:.4f}, q3 {o['q3']:.4f}, mean {o['mean']:.4f}, n={o['count']})")
    for k, v in summary["by_bucket"].items():
        print(f"  bucket {k}: median {v['median']:.4f} (n={v['count']})")
    return 0


def cmd_compare(args) -> int:
    report = experiments.run_compare(args.runs, args.out)
    for rec in report["pairwise"]:
        if rec["group"] == "all":
            p = "n/a" if rec["p_value"] is None else f"{rec['p_value']:.4g}"
            print(f"{rec['a']} vs {rec['b']}: p = {p}")
    print("best (all): " + ", ".join(report["best"]["all"]))
    return 0


def cmd_sweep(args) -> int:
    base = _load_experiment(args)
    dims = [int(v) for v in args.latent_dims.split(",")] if args.latent_dims else None
    fams = args.families.split(",") if args.families else None
    table = experiments.run_sweep(args.kind, base, args.out, latent_dims=dims, families=fams)
    for row in table:
        print(json.dumps({k: v for k, v in row.items() if k != "checksum"}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gprobunet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic multi-rater corpus")
    g.add_argument("--config", help="INI file with a [data] section")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model family")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--dataset")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a run on its test split")
    e.add_argument("--run", required=True)
    e.add_argument("--dataset")
    e.add_argument("--n-samples", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--self-eval", action="store_true", help="debug: score the labels against themselves")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="pairwise Wilcoxon tests between evaluated runs")
    c.add_argument("runs", nargs="+")
    c.add_argument("--out")
    c.add_argument("--seed", type=int, help="accepted for uniformity; comparison is deterministic")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="rank or rater-count sweep")
    s.add_argument("--kind", choices=("rank", "raters"), required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dataset")
    s.add_argument("--seed", type=int)
    s.add_argument("--latent-dims", help="comma-separated latent sizes for the rank sweep")
    s.add_argument("--families", help="comma-separated families for the rater sweep")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except tuple(EXIT_CODES) as exc:
        kind = {2: "config", 3: "data", 4: "checkpoint", 5: "training"}[EXIT_CODES[type(exc)]]
        print(f"error [{kind}]: {exc}", file=sys.stderr)
        return EXIT_CODES[type(exc)]
    except (FileNotFoundError, ValueError) as exc:
        print(f"error [input]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
