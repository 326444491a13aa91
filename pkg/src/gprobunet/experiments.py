"""Run orchestration: train, evaluate, compare and sweep.

Run directory layout::

    <run>/config.resolved     fully resolved experiment config (INI)
    <run>/checkpoint.bin      parameters (ensembles: checkpoint_<i>.bin per member)
    <run>/train_log.csv       epoch,train_loss,val_loss,ce,kl (ensembles add a member column)
    <run>/eval.csv            id,ged2,cross,pred_diversity,label_diversity,bucket
    <run>/summary.json        grouped statistics of the evaluation

Seeds: model initialisation uses ``derive_seed(seed, 0)``, training noise is
derived from ``seed`` inside :func:`training.train`, ensemble member ``i``
uses ``derive_seed(seed, 100 + i)`` as its own master seed, and evaluation
sampling uses ``derive_seed(seed, 7)``.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as config_mod
from . import data as data_mod
from .autodiff import Module, load_checkpoint, save_checkpoint
from .autodiff.checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig
from .data import Dataset, NormStats, compute_stats
from .metrics import PairedMetricSeries, aggregate, summarize, wilcoxon_signed_rank
from .model import LATENT_FAMILIES, Architecture, ProbUNet, UNetModel, base_family
from .training import (
    EnsemblePredictor,
    EvalRow,
    LabelPredictor,
    MCDropoutPredictor,
    Predictor,
    ProbUNetPredictor,
    Schedule,
    UNetPredictor,
    derive_seed,
    evaluate,
    train,
)

log = logging.getLogger(__name__)

SIGNIFICANCE = 0.05
EVAL_FIELDS = ("id", "ged2", "cross", "pred_diversity", "label_diversity", "bucket")


def build_model(cfg: ExperimentConfig, seed: int) -> Module:
    arch = Architecture(tuple(cfg.filters), cfg.bottleneck)
    rng = np.random.default_rng(derive_seed(seed, 0))
    if cfg.family in LATENT_FAMILIES:
        return ProbUNet(cfg.family, cfg.latent_dim, arch, rng, beta=cfg.beta, rank=cfg.rank or 1,
                        n_components=cfg.n_components or 1, tau=cfg.tau or 0.5,
                        kl_samples=cfg.kl_samples, ce_reduction=cfg.ce_reduction)
    dropout = cfg.dropout_rate if cfg.family == "mc-dropout" else 0.0
    return UNetModel(arch, rng, dropout=dropout, ce_reduction=cfg.ce_reduction)


def param_checksum(model: Module) -> str:
    h = hashlib.sha256()
    for name, arr in model.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def file_checksum(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _schedule(cfg: ExperimentConfig, seed: int) -> Schedule:
    return Schedule(lr=cfg.lr, batch_size=cfg.batch_size, patience=cfg.patience,
                    max_epochs=cfg.max_epochs, seed=seed, augment=cfg.augment)


def load_dataset(cfg: ExperimentConfig, dataset: Dataset | str | Path | None) -> Dataset:
    if isinstance(dataset, Dataset):
        return dataset
    path = dataset or cfg.dataset
    if not path:
        raise ConfigError("no dataset given (set [experiment] dataset or pass --dataset)")
    return data_mod.load(path)


def _checkpoint_names(cfg: ExperimentConfig) -> list[str]:
    if cfg.family == "ensemble":
        return [f"checkpoint_{i}.bin" for i in range(cfg.ensemble_size)]
    return ["checkpoint.bin"]


def _write_csv(path: Path, rows: Sequence[dict], header: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in header})


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

@dataclass
class TrainedRun:
    run_dir: Path
    config: ExperimentConfig
    checksums: list[str]
    best_epochs: list[int]


def run_train(cfg: ExperimentConfig, run_dir: str | Path, dataset: Dataset | str | Path | None = None
              ) -> TrainedRun:
    cfg = cfg.resolved()
    ds = load_dataset(cfg, dataset)
    if cfg.train_raters is not None and cfg.train_raters > ds.n_raters:
        raise ConfigError(f"train_raters={cfg.train_raters} exceeds the dataset's {ds.n_raters} raters")
    train_ds = ds.split("train")
    val_ds = ds.split("val")
    if cfg.train_raters is not None:
        train_ds, val_ds = train_ds.with_raters(cfg.train_raters), val_ds.with_raters(cfg.train_raters)
    stats = compute_stats(train_ds.images)
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(config_mod.dumps(cfg))

    n_members = cfg.ensemble_size if cfg.family == "ensemble" else 1
    log_rows: list[dict] = []
    checksums, best_epochs = [], []
    for i, name in enumerate(_checkpoint_names(cfg)):
        seed = derive_seed(cfg.seed, 100 + i) if n_members > 1 else cfg.seed
        model = build_model(cfg, seed)
        result = train(model, train_ds, val_ds, _schedule(cfg, seed), stats)
        meta = {"family": cfg.family, "member": i, "seed": seed, "norm_mean": stats.mean,
                "norm_std": stats.std, "best_epoch": result.best_epoch,
                "best_val_loss": result.best_val_loss}
        save_checkpoint(out / name, model.state_dict(), meta)
        checksums.append(param_checksum(model))
        best_epochs.append(result.best_epoch)
        for row in result.log:
            log_rows.append({**({"member": i} if n_members > 1 else {}), **row})
    header = (["member"] if n_members > 1 else []) + ["epoch", "train_loss", "val_loss", "ce", "kl"]
    _write_csv(out / "train_log.csv", log_rows, header)
    return TrainedRun(out, cfg, checksums, best_epochs)


def load_run(run_dir: str | Path) -> tuple[ExperimentConfig, list[Module], NormStats]:
    d = Path(run_dir)
    cfg = config_mod.load(d / "config.resolved").resolved()
    models, stats = [], None
    for name in _checkpoint_names(cfg):
        path = d / name
        if not path.exists():
            raise CheckpointError(f"{path}: missing checkpoint")
        arrays, meta = load_checkpoint(path)
        if meta.get("family") != cfg.family:
            raise CheckpointError(f"{path}: checkpoint family {meta.get('family')!r} != config family {cfg.family!r}")
        model = build_model(cfg, 0)
        try:
            model.load_state_dict(arrays)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: {exc}") from None
        model.eval()
        models.append(model)
        stats = NormStats(meta["norm_mean"], meta["norm_std"])
    return cfg, models, stats


def make_predictor(cfg: ExperimentConfig, models: Sequence[Module]) -> Predictor:
    if cfg.family in LATENT_FAMILIES:
        return ProbUNetPredictor(models[0])
    if cfg.family == "mc-dropout":
        return MCDropoutPredictor(models[0])
    if cfg.family == "ensemble":
        return EnsemblePredictor(models)
    return UNetPredictor(models[0])


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def summarize_rows(rows: Sequence[EvalRow], family: str, n_samples: int) -> dict:
    stochastic = not all(math.isnan(r.ged2) for r in rows)
    score = [r.ged2 if stochastic else r.cross for r in rows]
    buckets = [r.bucket for r in rows]
    n_raters = max(buckets) if buckets else 0
    summary = {
        "family": family,
        "n_eval_samples": n_samples,
        "n_test": len(rows),
        "metric": "ged2" if stochastic else "cross",
        "overall": aggregate(score)["all"],
        "by_bucket": {str(k): v for k, v in aggregate(score, buckets, range(1, n_raters + 1)).items()},
        "terms": {
            "cross": summarize([r.cross for r in rows]),
            "label_diversity": summarize([r.label_diversity for r in rows]),
        },
    }
    if stochastic:
        summary["terms"]["ged2"] = summarize([r.ged2 for r in rows])
        summary["terms"]["pred_diversity"] = summarize([r.pred_diversity for r in rows])
    return summary


def run_eval(run_dir: str | Path, dataset: Dataset | str | Path | None = None, n_samples: int | None = None,
             seed: int | None = None, self_eval: bool = False) -> dict:
    """Evaluate a run on its test split; writes eval.csv and summary.json.

    ``self_eval`` replaces the model by the rater masks themselves (debug check:
    GED² of the label set against itself).
    """
    d = Path(run_dir)
    cfg, models, stats = load_run(d)
    ds = load_dataset(cfg, dataset)
    test = ds.split("test")
    n = n_samples or cfg.n_eval_samples
    eval_seed = derive_seed(cfg.seed if seed is None else seed, 7)
    predictor = LabelPredictor(test) if self_eval else make_predictor(cfg, models)
    rows = evaluate(predictor, test, stats, n, eval_seed)
    _write_csv(d / "eval.csv", [{"id": r.sample_id, **{k: v for k, v in asdict(r).items() if k != "sample_id"}}
                                for r in rows], EVAL_FIELDS)
    summary = summarize_rows(rows, cfg.family, n)
    summary["self_eval"] = self_eval
    (d / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def read_eval(run_dir: str | Path) -> list[dict]:
    path = Path(run_dir) / "eval.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path}: run has not been evaluated")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("ged2", "cross", "pred_diversity", "label_diversity"):
            r[k] = float(r[k])
        r["bucket"] = int(r["bucket"])
    return rows


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def _scores(rows: list[dict]) -> dict[str, float]:
    stochastic = not all(math.isnan(r["ged2"]) for r in rows)
    return {r["id"]: (r["ged2"] if stochastic else r["cross"]) for r in rows}


def compare_scores(named: dict[str, dict[str, float]], buckets: dict[str, int] | None = None,
                   alpha: float = SIGNIFICANCE) -> dict:
    """Pairwise Wilcoxon tests per group and best-configuration marking.

    Lower scores are better. A run is marked best in a group when it has the
    lowest median or when its difference to that run is not significant.
    """
    names = list(named)
    if len(names) < 2:
        raise ValueError("compare needs at least two runs")
    ref = set(named[names[0]])
    for n in names[1:]:
        if set(named[n]) != ref:
            raise ValueError(f"runs {names[0]!r} and {n!r} were evaluated on different sample ids")
    ids = sorted(ref)
    groups: dict[str, list[str]] = {"all": ids}
    if buckets:
        for sid in ids:
            groups.setdefault(f"bucket_{buckets[sid]}", []).append(sid)
    medians: dict[str, dict[str, float]] = {}
    pairwise, best = [], {}
    for g, gids in groups.items():
        medians[g] = {n: float(np.median([named[n][i] for i in gids])) for n in names}
        pvals = {}
        for a, b in itertools.combinations(names, 2):
            series = PairedMetricSeries(gids, [named[a][i] for i in gids], [named[b][i] for i in gids])
            try:
                res = wilcoxon_signed_rank(series)
                rec = {"a": a, "b": b, "group": g, "statistic": res.statistic, "p_value": res.p_value,
                       "n": res.n, "method": res.method}
            except ValueError:
                rec = {"a": a, "b": b, "group": g, "statistic": None, "p_value": None,
                       "n": int(np.count_nonzero(series.a - series.b)), "method": "too-few-pairs"}
            pairwise.append(rec)
            pvals[(a, b)] = pvals[(b, a)] = rec["p_value"]
        top = min(names, key=lambda n: medians[g][n])
        best[g] = [n for n in names
                   if n == top or pvals[(top, n)] is None or pvals[(top, n)] >= alpha]
    return {"medians": medians, "pairwise": pairwise, "best": best, "alpha": alpha}


def run_compare(run_dirs: Sequence[str | Path], out: str | Path | None = None,
                names: Sequence[str] | None = None) -> dict:
    run_dirs = [Path(r) for r in run_dirs]
    if names is None:
        names = [r.name for r in run_dirs]
        if len(set(names)) != len(names):
            names = [str(r) for r in run_dirs]
    evals = {n: read_eval(r) for n, r in zip(names, run_dirs)}
    scores = {n: _scores(rows) for n, rows in evals.items()}
    buckets = {r["id"]: r["bucket"] for r in next(iter(evals.values()))}
    report = compare_scores(scores, buckets)
    report["runs"] = {n: str(r) for n, r in zip(names, run_dirs)}
    report["metric"] = {n: ("cross" if all(math.isnan(r["ged2"]) for r in rows) else "ged2")
                        for n, rows in evals.items()}
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
        rows = [{"group": g, "run": n, "median": report["medians"][g][n], "best": n in report["best"][g]}
                for g in report["medians"] for n in names]
        _write_csv(out / "comparison.csv", rows, ("group", "run", "median", "best"))
    return report


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def rank_sweep_points(latent_dims: Sequence[int]) -> list[tuple[int, int]]:
    return [(z, r) for z in latent_dims for r in range(1, z)]


def run_sweep(kind: str, base: ExperimentConfig, out_dir: str | Path, dataset: Dataset | str | Path | None = None,
              latent_dims: Sequence[int] | None = None, families: Sequence[str] | None = None) -> list[dict]:
    """Rank sweep (low-rank families) or rater-count sweep; writes sweep.csv and sweep.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(base, dataset)
    points: list[tuple[str, ExperimentConfig, dict]] = []
    if kind == "rank":
        if base_family(base.family) != "fc-lr":
            raise ConfigError(f"rank sweep needs a low-rank family, got {base.family!r}")
        dims = list(latent_dims) if latent_dims else [base.resolved().latent_dim]
        for z, r in rank_sweep_points(dims):
            points.append((f"z{z}_r{r}", replace(base, latent_dim=z, rank=r), {"latent_dim": z, "rank": r}))
    elif kind == "raters":
        for fam in families or [base.family]:
            fam_base = replace(base, family=fam) if fam == base.family else _retarget(base, fam)
            for k in range(1, ds.n_raters + 1):
                points.append((f"{fam}_k{k}", replace(fam_base, train_raters=k),
                               {"family": fam, "train_raters": k}))
    else:
        raise ConfigError(f"unknown sweep kind {kind!r}")
    table = []
    for name, cfg, keys in points:
        run_dir = out / name
        trained = run_train(cfg, run_dir, ds)
        summary = run_eval(run_dir, ds)
        table.append({**keys, "run": name, "metric": summary["metric"], **summary["overall"],
                      "checksum": trained.checksums[0]})
    header = list(table[0].keys()) if table else []
    _write_csv(out / "sweep.csv", table, header)
    note = "raters are taken in index order (first k)" if kind == "raters" else ""
    (out / "sweep.json").write_text(json.dumps({"kind": kind, "rows": table, "note": note}, indent=1) + "\n")
    return table


def _retarget(base: ExperimentConfig, family: str) -> ExperimentConfig:
    """Copy ``base`` to another family, dropping family-specific fields."""
    return replace(base, family=family, latent_dim=None, rank=None, n_components=None, tau=None,
                   dropout_rate=None, ensemble_size=None)
