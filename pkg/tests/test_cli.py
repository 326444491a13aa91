import hashlib
import json
import math
import shutil
from pathlib import Path

import numpy as np
import pytest

from gprobunet.autodiff.checkpoint import load_checkpoint, save_checkpoint
from gprobunet.cli import main
from gprobunet.experiments import compare_scores, rank_sweep_points, read_eval

DATA_INI = """[data]
image_size = 16
core_radius = 2.0, 3.0
n_samples = 30
split_sizes = 20, 5, 5
p = {p}
"""

RUN_INI = """[experiment]
family = {family}
seed = 0
{extra}
[architecture]
filters = 4, 8
bottleneck = 16

[schedule]
lr = 1e-3
max_epochs = 1
batch_size = 10
"""


def tree_checksum(d: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(p for p in d.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(d)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def run_ini(tmp: Path, family: str, extra: str = "") -> Path:
    return write(tmp / f"{family}.ini", RUN_INI.format(family=family, extra=extra))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("corpus")
    ini = write(tmp / "data.ini", DATA_INI.format(p=0.5))
    assert main(["gen-data", "--config", str(ini), "--out", str(tmp / "ds"), "--seed", "0"]) == 0
    return tmp / "ds"


@pytest.fixture(scope="module")
def aa_run(corpus, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("aa")
    cfg = run_ini(tmp, "aa", "\n[latent]\nlatent_dim = 2\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp / "run"), "--dataset", str(corpus)]) == 0
    assert main(["eval", "--run", str(tmp / "run")]) == 0
    return tmp / "run"


# -- gen-data ---------------------------------------------------------------------

def test_gen_data_is_reproducible(tmp_path, capsys):
    ini = write(tmp_path / "d.ini", DATA_INI.format(p=0.5))
    for name in ("a", "b"):
        assert main(["gen-data", "--config", str(ini), "--out", str(tmp_path / name), "--seed", "5"]) == 0
    assert tree_checksum(tmp_path / "a") == tree_checksum(tmp_path / "b")
    out = capsys.readouterr().out
    assert "rater-agreement buckets" in out
    main(["gen-data", "--config", str(ini), "--out", str(tmp_path / "c"), "--seed", "6"])
    assert tree_checksum(tmp_path / "a") != tree_checksum(tmp_path / "c")


def test_full_agreement_prints_zero_label_diversity(tmp_path, capsys):
    ini = write(tmp_path / "d.ini", DATA_INI.format(p=1.0))
    assert main(["gen-data", "--config", str(ini), "--out", str(tmp_path / "ds")]) == 0
    assert "label diversity E[d(Y,Y')]: 0.0000" in capsys.readouterr().out


def test_bucket_histogram_has_mass_in_several_buckets(tmp_path, capsys):
    ini = write(tmp_path / "d.ini", DATA_INI.format(p=0.5).replace("n_samples = 30", "n_samples = 60")
                .replace("split_sizes = 20, 5, 5", "split_sizes = none"))
    main(["gen-data", "--config", str(ini), "--out", str(tmp_path / "ds")])
    line = next(l for l in capsys.readouterr().out.splitlines() if l.startswith("rater-agreement"))
    counts = [int(kv.split(":")[1]) for kv in line.split(": ", 1)[1].split(", ")]
    assert sum(c > 0 for c in counts) >= 3


def test_bad_data_config_exit_codes(tmp_path, capsys):
    bad = write(tmp_path / "bad.ini", "[data]\np = 2.0\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 3
    assert "error [data]" in capsys.readouterr().err
    nosec = write(tmp_path / "nosec.ini", "[other]\n")
    assert main(["gen-data", "--config", str(nosec), "--out", str(tmp_path / "x")]) == 2


# -- train / eval -----------------------------------------------------------------

def test_run_directory_layout(aa_run):
    names = {p.name for p in aa_run.iterdir()}
    assert {"config.resolved", "checkpoint.bin", "train_log.csv", "eval.csv", "summary.json"} <= names
    header = (aa_run / "train_log.csv").read_text().splitlines()[0]
    assert header == "epoch,train_loss,val_loss,ce,kl"
    summary = json.loads((aa_run / "summary.json").read_text())
    assert summary["metric"] == "ged2" and summary["n_eval_samples"] == 16
    assert len(read_eval(aa_run)) == 5


def test_retraining_from_resolved_config_reproduces(aa_run, corpus, tmp_path):
    assert main(["train", "--config", str(aa_run / "config.resolved"), "--out", str(tmp_path / "r"),
                 "--dataset", str(corpus)]) == 0
    assert (tmp_path / "r" / "checkpoint.bin").read_bytes() == (aa_run / "checkpoint.bin").read_bytes()


def test_eval_is_seeded(aa_run):
    first = (aa_run / "eval.csv").read_text()
    main(["eval", "--run", str(aa_run)])
    assert (aa_run / "eval.csv").read_text() == first
    main(["eval", "--run", str(aa_run), "--seed", "9"])
    assert (aa_run / "eval.csv").read_text() != first
    main(["eval", "--run", str(aa_run)])


def test_self_evaluation_scores_zero(aa_run, tmp_path, capsys):
    d = tmp_path / "self"
    shutil.copytree(aa_run, d)
    assert main(["eval", "--run", str(d), "--self-eval"]) == 0
    rows = read_eval(d)
    assert all(abs(r["ged2"]) < 1e-12 for r in rows)


def test_collapsed_prior_has_no_prediction_diversity(aa_run, tmp_path):
    d = tmp_path / "collapsed"
    shutil.copytree(aa_run, d)
    arrays, meta = load_checkpoint(d / "checkpoint.bin")
    arrays["prior_net.head.weight"][:] = 0.0
    arrays["prior_net.head.bias"][:] = [0.0, 0.0, -30.0, -30.0]
    save_checkpoint(d / "checkpoint.bin", arrays, meta)
    assert main(["eval", "--run", str(d)]) == 0
    assert all(r["pred_diversity"] < 1e-9 for r in read_eval(d))


def test_unet_reports_overlap_term_only(corpus, tmp_path, capsys):
    assert main(["train", "--config", str(run_ini(tmp_path, "unet")), "--out", str(tmp_path / "u"),
                 "--dataset", str(corpus)]) == 0
    assert main(["eval", "--run", str(tmp_path / "u")]) == 0
    rows = read_eval(tmp_path / "u")
    assert all(math.isnan(r["ged2"]) and 0 <= r["cross"] <= 2 for r in rows)
    assert json.loads((tmp_path / "u" / "summary.json").read_text())["metric"] == "cross"
    assert "unet: cross median" in capsys.readouterr().out


def test_ensemble_members_have_distinct_checksums(corpus, tmp_path, capsys):
    cfg = run_ini(tmp_path, "ensemble", "\n[baseline]\nensemble_size = 4\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "e"), "--dataset", str(corpus)]) == 0
    sums = [l.rsplit(" ", 1)[1] for l in capsys.readouterr().out.splitlines() if l.startswith("member")]
    assert len(sums) == 4 and len(set(sums)) == 4
    assert len(list((tmp_path / "e").glob("checkpoint_*.bin"))) == 4
    assert main(["eval", "--run", str(tmp_path / "e"), "--n-samples", "4"]) == 0


def test_invalid_config_fails_before_training(corpus, tmp_path, capsys):
    cfg = run_ini(tmp_path, "fc-lr", "\n[latent]\nlatent_dim = 2\nrank = 2\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r"), "--dataset", str(corpus)]) == 2
    assert "error [config]" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


def test_missing_dataset_is_a_data_error(tmp_path, capsys):
    cfg = run_ini(tmp_path, "unet")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r"),
                 "--dataset", str(tmp_path / "nowhere")]) == 3
    assert "manifest" in capsys.readouterr().err


def test_checkpoint_family_mismatch(aa_run, tmp_path, capsys):
    d = tmp_path / "mismatch"
    shutil.copytree(aa_run, d)
    arrays, meta = load_checkpoint(d / "checkpoint.bin")
    save_checkpoint(d / "checkpoint.bin", arrays, {**meta, "family": "fc"})
    assert main(["eval", "--run", str(d)]) == 4
    assert "family" in capsys.readouterr().err


def test_truncated_checkpoint(aa_run, tmp_path, capsys):
    d = tmp_path / "truncated"
    shutil.copytree(aa_run, d)
    raw = (d / "checkpoint.bin").read_bytes()
    (d / "checkpoint.bin").write_bytes(raw[:-20])
    assert main(["eval", "--run", str(d)]) == 4
    assert "truncated" in capsys.readouterr().err


# -- compare ------------------------------------------------------------------------

def _fake_run(d: Path, scores: dict[str, float]) -> Path:
    d.mkdir(parents=True)
    lines = ["id,ged2,cross,pred_diversity,label_diversity,bucket"]
    lines += [f"{k},{v!r},1.0,0.5,0.5,{1 + i % 4}" for i, (k, v) in enumerate(scores.items())]
    (d / "eval.csv").write_text("\n".join(lines) + "\n")
    return d


def test_compare_run_with_itself_is_a_tie(aa_run, tmp_path):
    shutil.copytree(aa_run, tmp_path / "twin")
    assert main(["compare", str(aa_run), str(tmp_path / "twin"), "--out", str(tmp_path / "cmp")]) == 0
    rep = json.loads((tmp_path / "cmp" / "comparison.json").read_text())
    overall = [r for r in rep["pairwise"] if r["group"] == "all"][0]
    assert overall["p_value"] == 1.0
    assert sorted(rep["best"]["all"]) == ["run", "twin"]


def test_uniformly_better_run_is_marked_best(tmp_path, capsys):
    rng = np.random.default_rng(0)
    b = {f"s{i:02d}": float(v) for i, v in enumerate(rng.uniform(0.2, 1.0, 20))}
    a = {k: v - 0.1 for k, v in b.items()}
    ra, rb = _fake_run(tmp_path / "A", a), _fake_run(tmp_path / "B", b)
    assert main(["compare", str(ra), str(rb)]) == 0
    out = capsys.readouterr().out
    assert "best (all): A" in out
    p = float(out.split("p = ")[1].split()[0])
    assert p < 0.05


def test_three_runs_give_three_tests_and_argument_order_does_not_matter():
    rng = np.random.default_rng(1)
    runs = {n: {f"s{i}": float(v) for i, v in enumerate(rng.normal(m, 0.2, 25))}
            for n, m in (("x", 0.5), ("y", 0.6), ("z", 0.9))}
    fwd = compare_scores(runs)
    rev = compare_scores(dict(reversed(list(runs.items()))))
    assert len([r for r in fwd["pairwise"] if r["group"] == "all"]) == 3
    key = lambda r: frozenset((r["a"], r["b"]))
    pf = {key(r): r["p_value"] for r in fwd["pairwise"]}
    pr = {key(r): r["p_value"] for r in rev["pairwise"]}
    assert pf == pytest.approx(pr)
    assert sorted(fwd["best"]["all"]) == sorted(rev["best"]["all"])


def test_misaligned_ids_rejected(tmp_path, capsys):
    ra = _fake_run(tmp_path / "A", {f"s{i}": 0.1 * i for i in range(6)})
    rb = _fake_run(tmp_path / "B", {f"t{i}": 0.1 * i for i in range(6)})
    assert main(["compare", str(ra), str(rb)]) == 1
    assert "different sample ids" in capsys.readouterr().err


def test_too_few_differences_reported_not_raised():
    a = {f"s{i}": 1.0 for i in range(6)}
    b = dict(a, s0=0.0, s1=0.0)
    rep = compare_scores({"a": a, "b": b})
    assert rep["pairwise"][0]["method"] == "too-few-pairs"
    assert sorted(rep["best"]["all"]) == ["a", "b"]


# -- sweeps -----------------------------------------------------------------------

def test_rank_sweep_points():
    assert rank_sweep_points([2]) == [(2, 1)]
    assert rank_sweep_points([2, 4]) == [(2, 1), (4, 1), (4, 2), (4, 3)]


def test_rank_sweep_for_two_latent_dims_runs_rank_one(corpus, tmp_path, capsys):
    cfg = run_ini(tmp_path, "fc-lr", "\n[latent]\nlatent_dim = 2\nrank = 1\n")
    assert main(["sweep", "--kind", "rank", "--config", str(cfg), "--out", str(tmp_path / "s"),
                 "--dataset", str(corpus), "--latent-dims", "2"]) == 0
    rows = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert [(r["latent_dim"], r["rank"]) for r in rows] == [(2, 1)]


def test_rater_sweep_rows_and_full_subset_matches_plain_run(corpus, tmp_path, capsys):
    cfg = run_ini(tmp_path, "unet")
    assert main(["sweep", "--kind", "raters", "--config", str(cfg), "--out", str(tmp_path / "s"),
                 "--dataset", str(corpus), "--families", "unet,mc-dropout"]) == 0
    rows = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert [(r["family"], r["train_raters"]) for r in rows] == [(f, k) for f in ("unet", "mc-dropout")
                                                                for k in (1, 2, 3, 4)]
    table = json.loads((tmp_path / "s" / "sweep.json").read_text())["rows"]
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "plain"), "--dataset", str(corpus)]) == 0
    plain = capsys.readouterr().out.split("parameter checksum ")[1].split()[0]
    full = next(r for r in table if r["family"] == "unet" and r["train_raters"] == 4)
    assert full["checksum"].startswith(plain)
    partial = next(r for r in table if r["family"] == "unet" and r["train_raters"] == 1)
    assert not partial["checksum"].startswith(plain)


def test_rank_sweep_rejects_other_families(corpus, tmp_path):
    cfg = run_ini(tmp_path, "aa")
    assert main(["sweep", "--kind", "rank", "--config", str(cfg), "--out", str(tmp_path / "s"),
                 "--dataset", str(corpus)]) == 2
