"""End-to-end command line runs on a tiny phantom set."""

import csv
import json
import logging

import pytest
import torch

from tinydistill import pipeline
from tinydistill.cli import run
from tinydistill.config import load_config
from tinydistill.coreset import random_selection, read_selection_ids

TINY = {
    "seed": 0,
    "data": {"phantoms": 30, "classes": 3, "image_size": 16},
    "teacher": {"depth": 2, "dim": 12, "heads": 2, "patch_size": 4, "mid_layer": 1, "tap_layers": [1, 2],
                "epochs": 1, "trace_epochs": 1, "batch_size": 8},
    "student": {"depth": 2, "dim": 8, "heads": 2, "patch_size": 4, "mid_layer": 1, "tap_layers": [1, 2]},
    "coreset": {"fraction": 0.5, "k1": 2, "k2": 2},
    "distill": {"epochs": 2, "batch_size": 8},
    "adapt": {"epochs": 2, "seg_epochs": 1, "batch_size": 8},
    "sweep": {"layers": [1, 2], "budgets": [4, 8]},
}


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    torch.set_num_threads(1)
    root = tmp_path_factory.mktemp("runs")
    cfg_path = root / "tiny.json"
    cfg_path.write_text(json.dumps({**TINY, "out_root": str(root / "out")}))
    return root / "out", str(cfg_path)


def cli(cfg_path, *args):
    return run([args[0], "--config", cfg_path, *args[1:]])


@pytest.fixture(scope="module")
def chain(env):
    out, cfg_path = env
    for cmd in (("pretrain-teacher",), ("curate",), ("distill",), ("adapt", "--vanilla")):
        assert cli(cfg_path, *cmd) == 0, cmd
    return out, cfg_path, load_config(cfg_path)


def test_missing_upstream_fails_fast_without_output(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**TINY, "out_root": str(tmp_path / "out")}))
    assert run(["distill", "--config", str(cfg)]) == 1
    assert "tinydistill curate" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_invalid_config_exits_before_writing(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**TINY, "out_root": str(tmp_path / "out")}))
    assert run(["pretrain-teacher", "--config", str(cfg), "--coreset.alpha=3"]) == 2
    assert "coreset.alpha" in capsys.readouterr().err
    assert run(["pretrain-teacher", "--config", str(cfg), "--nosuch.key=1"]) == 2
    assert run(["pretrain-teacher", "--config", str(cfg), "stray"]) == 2
    assert not (tmp_path / "out").exists()


def test_env_var_overrides_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("TINYDISTILL_OUT", str(tmp_path / "elsewhere"))
    cfg = load_config(None)
    assert cfg.stage_dir("teacher").parent.parent == tmp_path / "elsewhere"


def test_chain_writes_artifacts(chain):
    _, _, cfg = chain
    teacher = cfg.stage_dir("teacher")
    for name in ("teacher.pt", "traces.jsonl", "log.csv", "features.bin", "config.json", "files.json"):
        assert (teacher / name).is_file(), name
    coreset = read_selection_ids(cfg.stage_dir("curate") / "coreset.jsonl")
    pool = pipeline.read_feature_shard(teacher / "features.bin").ids
    assert len(coreset) == cfg.budget_for(len(pool))
    distill = cfg.stage_dir("distill")
    val = json.loads((distill / "val.json").read_text())
    assert val["n_train"] == len(coreset)
    assert val["val_loss"] is not None
    log = read_rows(distill / "log.csv")
    assert [int(r["epoch"]) for r in log] == [1, 2]


def test_adapt_vanilla_emits_delta(chain):
    _, _, cfg = chain
    rows = read_rows(cfg.stage_dir("adapt") / "comparison.csv")
    assert {"vanilla", "delta"} <= set(rows[0])
    for r in rows:
        assert float(r["delta"]) == pytest.approx(float(r["value"]) - float(r["vanilla"]), abs=1e-12)


def test_evaluate_reproduces_adapt_score(chain, capsys):
    _, cfg_path, cfg = chain
    capsys.readouterr()
    assert cli(cfg_path, "evaluate") == 0
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    stored = next(r for r in read_rows(cfg.stage_dir("adapt") / "eval.csv") if r["class"] == "all")
    assert printed["aggregate"] == pytest.approx(float(stored["value"]), abs=1e-9)


def test_rerun_reuses_and_snapshot_resume_is_identical(chain, capsys):
    _, cfg_path, cfg = chain
    distill = cfg.stage_dir("distill")
    before = (distill / "log.csv").read_text()
    capsys.readouterr()
    assert cli(cfg_path, "distill") == 0
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["reused"] is True
    # Resume from the stored snapshot with --force: same directory, byte-identical log.
    assert run(["distill", "--config", str(distill / "config.json"), "--force"]) == 0
    assert (distill / "log.csv").read_text() == before


def test_budget_above_pool_warns_and_takes_all(chain, caplog):
    _, cfg_path, cfg = chain
    with caplog.at_level(logging.WARNING):
        assert cli(cfg_path, "curate", "--budget", "1000") == 0
    assert any("budget" in r.message for r in caplog.records)
    big = cfg.with_overrides(["coreset.budget=1000", "coreset.fraction=null"])
    ids = read_selection_ids(big.stage_dir("curate") / "coreset.jsonl")
    assert len(ids) == len(pipeline.read_feature_shard(cfg.stage_dir("teacher") / "features.bin").ids)


def test_random_strategy_matches_baseline(chain):
    _, cfg_path, cfg = chain
    assert cli(cfg_path, "curate", "--strategy", "random") == 0
    rnd = cfg.with_overrides(['coreset.strategy="random"'])
    assert rnd.stage_dir("curate") != cfg.stage_dir("curate")
    ids = read_selection_ids(rnd.stage_dir("curate") / "coreset.jsonl")
    pool = pipeline.read_feature_shard(cfg.stage_dir("teacher") / "features.bin").ids
    assert sorted(ids) == sorted(random_selection(pool, cfg.budget_for(len(pool)), cfg.seed))


def test_fixed_weighting_logs_unit_consistency(chain):
    _, cfg_path, cfg = chain
    assert cli(cfg_path, "distill", "--distill.dynamic_weighting=false") == 0
    fixed = cfg.with_overrides(["distill.dynamic_weighting=false"])
    for r in read_rows(fixed.stage_dir("distill") / "log.csv"):
        assert float(r["mean_s_cons"]) == 1.0


def test_no_mim_logs_zero_reconstruction(chain):
    _, cfg_path, cfg = chain
    assert cli(cfg_path, "distill", "--distill.recon_domains=[]") == 0
    plain = cfg.with_overrides(["distill.recon_domains=[]"])
    assert json.loads((plain.stage_dir("distill") / "val.json").read_text())["variant"] == "no-MIM/dynamic"
    for r in read_rows(plain.stage_dir("distill") / "log.csv"):
        assert float(r["loss_recon_spa"]) == 0.0 and float(r["loss_recon_freq"]) == 0.0


def test_report_writes_figures_and_summary(chain, tmp_path):
    out, cfg_path, _ = chain
    assert run(["report", str(out), "--out", str(tmp_path / "rep"), "--config", cfg_path]) == 0
    for name in ("summary.md", "loss.png", "loss.svg", "lr.png", "mask_spatial.png", "mask_frequency.png"):
        assert (tmp_path / "rep" / name).is_file(), name
    text = (tmp_path / "rep" / "summary.md").read_text()
    assert "Downstream evaluation" in text and "delta" in text


def test_report_without_runs_fails(tmp_path, capsys):
    assert run(["report", str(tmp_path)]) == 1
    assert "no finished runs" in capsys.readouterr().err


def test_subset_sweep(chain):
    _, cfg_path, cfg = chain
    assert cli(cfg_path, "sweep", "--kind", "subset") == 0
    sweep = pipeline.sweep_dir(cfg.with_overrides(['sweep.kind="subset"']))
    rows = read_rows(sweep / "results.csv")
    assert {(int(r["budget"]), r["strategy"]) for r in rows} == {(4, "curated"), (4, "random"), (8, "curated"), (8, "random")}
    assert all(float(r["value"]) > 0 for r in rows)
    assert (sweep / "metric_vs_subset.png").is_file()


def test_stage_hash_tracks_only_upstream_sections():
    base = load_config(None)
    changed = base.with_overrides(["adapt.lr0=0.5"])
    assert base.stage_dir("distill") == changed.stage_dir("distill")
    assert base.stage_dir("adapt") != changed.stage_dir("adapt")
    assert base.stage_dir("curate") != base.with_overrides(["coreset.k1=5"]).stage_dir("curate")
    assert base.stage_dir("teacher") == base.with_overrides(["coreset.k1=5"]).stage_dir("teacher")
