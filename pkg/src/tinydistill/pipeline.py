"""Stage runners behind the command line: each writes one content-addressed run directory."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .adapt import EvalResult, evaluate, train_probe, train_seg, write_eval_csv
from .config import ConfigError, RunConfig, save_snapshot
from .coreset import (
    curate,
    random_selection,
    read_selection_ids,
    selection_report,
    write_report_csv,
    write_selection,
)
from .data import (
    SampleRecord,
    by_split,
    generate_phantoms,
    load_images,
    load_manifest,
    load_masks,
    stratified_split,
    write_manifest,
)
from .distill import LOG_COLUMNS, ablation_variants, run_distillation
from .encoder import (
    build_encoder,
    embed_manifest,
    fit_teacher,
    load_checkpoint,
    read_feature_shard,
    read_traces,
    save_checkpoint,
    state_checksum,
    write_traces,
)
from .seeding import derive_seed

logger = logging.getLogger(__name__)

DONE = "files.json"


class MissingArtifactError(RuntimeError):
    pass


@dataclass
class StageResult:
    stage: str
    run_dir: Path
    files: list[str]
    reused: bool = False


# ------------------------------------------------------------------ plumbing


def _finish(cfg: RunConfig, stage: str, run_dir: Path, files: Sequence[str]) -> StageResult:
    save_snapshot(cfg, stage, run_dir / "config.json")
    listing = sorted({*files, "config.json"})
    (run_dir / DONE).write_text(json.dumps({"stage": stage, "hash": cfg.stage_hash(stage), "files": listing}, indent=2) + "\n")
    logger.info("%s -> %s", stage, run_dir)
    return StageResult(stage, run_dir, listing)


def _reuse(cfg: RunConfig, stage: str, force: bool) -> Optional[StageResult]:
    run_dir = cfg.stage_dir(stage)
    done = run_dir / DONE
    if done.is_file() and not force:
        logger.info("%s: reusing %s", stage, run_dir)
        return StageResult(stage, run_dir, json.loads(done.read_text())["files"], reused=True)
    return None


def _require(cfg: RunConfig, stage: str, command: str) -> Path:
    run_dir = cfg.stage_dir(stage)
    if not (run_dir / DONE).is_file():
        raise MissingArtifactError(
            f"no completed {stage} run at {run_dir}; run `tinydistill {command}` with the same config first"
        )
    return run_dir


def write_log_csv(rows: Sequence[dict], path: Path, columns: Optional[Sequence[str]] = None) -> Path:
    columns = list(columns or (rows[0].keys() if rows else []))
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def read_csv(path: Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------- data


def prepare_data(cfg: RunConfig, force: bool = False) -> tuple[Path, list[SampleRecord]]:
    reused = _reuse(cfg, "data", force)
    run_dir = cfg.stage_dir("data")
    if reused:
        return run_dir, load_manifest(run_dir / "manifest.jsonl")
    d = cfg.data
    size = (d.image_size, d.image_size)
    if d.manifest is None:
        records = generate_phantoms(d.phantoms, d.classes, size, derive_seed(cfg.seed, "phantoms"), run_dir / "phantoms")
        records = stratified_split(records, d.split_ratios, cfg.seed)
    else:
        records = load_manifest(d.manifest)
        if not records:
            raise ValueError(f"manifest {d.manifest} is empty")
        if d.resplit and all(r.split == "train" for r in records) and all(r.label is not None for r in records):
            records = stratified_split(records, d.split_ratios, cfg.seed)
    if not by_split(records, "train"):
        raise ValueError("dataset has an empty train split")
    write_manifest(records, run_dir / "manifest.jsonl")
    _finish(cfg, "data", run_dir, ["manifest.jsonl"])
    return run_dir, load_manifest(run_dir / "manifest.jsonl")


def split_arrays(cfg: RunConfig, records: Sequence[SampleRecord], split: str, masks: bool = False):
    recs = by_split(records, split)
    size = (cfg.data.image_size, cfg.data.image_size)
    images = load_images(recs, size)
    out = (recs, images)
    if masks:
        out += (load_masks(recs, size),)
    return out


# ------------------------------------------------------------------- teacher


def run_teacher(cfg: RunConfig, force: bool = False) -> StageResult:
    if (res := _reuse(cfg, "teacher", force)) is not None:
        return res
    _, records = prepare_data(cfg)
    recs, images = split_arrays(cfg, records, "train")
    t = cfg.teacher
    enc_cfg = cfg.encoder_config("teacher")
    result = fit_teacher(
        images,
        [r.id for r in recs],
        enc_cfg,
        epochs=t.epochs,
        seed=cfg.seed,
        batch_size=t.batch_size,
        lr=t.lr,
        weight_decay=t.weight_decay,
        sspec=cfg.spatial_spec(),
        fspec=cfg.frequency_spec(),
        trace_epochs=t.trace_epochs,
    )
    run_dir = cfg.stage_dir("teacher")
    save_checkpoint(
        run_dir / "teacher.pt",
        enc_cfg,
        {"encoder": result.encoder, "decoder": result.decoder},
        kind="teacher",
        meta={"epochs": t.epochs, "checksum": state_checksum(result.encoder)},
    )
    write_traces(run_dir / "traces.jsonl", result.traces)
    write_log_csv(result.log, run_dir / "log.csv")
    embed_manifest(result.encoder, recs, out_path=run_dir / "features.bin")
    return _finish(cfg, "teacher", run_dir, ["teacher.pt", "traces.jsonl", "log.csv", "features.bin", "features.ids.jsonl"])


def load_teacher(cfg: RunConfig):
    run_dir = _require(cfg, "teacher", "pretrain-teacher")
    return load_checkpoint(run_dir / "teacher.pt", expect_config=cfg.encoder_config("teacher")).encoder()


# -------------------------------------------------------------------- curate


def run_curate(cfg: RunConfig, force: bool = False) -> StageResult:
    if (res := _reuse(cfg, "curate", force)) is not None:
        return res
    teacher_dir = _require(cfg, "teacher", "pretrain-teacher")
    _, records = prepare_data(cfg)
    train = by_split(records, "train")
    feats_path = teacher_dir / "features.bin"
    if not feats_path.is_file():
        logger.info("features missing; embedding the train split with the teacher")
        embed_manifest(load_teacher(cfg), train, out_path=feats_path)
    fs = read_feature_shard(feats_path)
    traces = read_traces(teacher_dir / "traces.jsonl")
    n = len(fs.ids)
    budget = cfg.budget_for(n)
    if budget >= n:
        logger.warning("budget %d >= %d available samples; selecting the full set", budget, n)
    c = cfg.coreset
    organ = {r.id: r.organ for r in train}
    k1 = cfg.k1_for([organ.get(i) for i in fs.ids])
    selection, tree, scores = curate(fs.ids, fs.features, traces, budget, k1, c.k2, c.alpha, c.beta, cfg.seed)
    run_dir = cfg.stage_dir("curate")
    run_dir.mkdir(parents=True, exist_ok=True)
    if c.strategy == "random":
        chosen = set(random_selection(fs.ids, budget, cfg.seed))
        by_id = {s.id: s for items in selection.ranked.values() for s in items}
        selection = dataclasses.replace(
            selection, selected=sorted((by_id[i] for i in chosen), key=lambda s: (s.r, s.id))
        )
    write_selection(selection, run_dir / "coreset.jsonl")
    write_report_csv(selection_report(selection, tree, scores), run_dir / "summary.csv")
    return _finish(cfg, "curate", run_dir, ["coreset.jsonl", "summary.csv"])


# ------------------------------------------------------------------- distill


def run_distill(cfg: RunConfig, force: bool = False) -> StageResult:
    if (res := _reuse(cfg, "distill", force)) is not None:
        return res
    curate_dir = _require(cfg, "curate", "curate")
    teacher = load_teacher(cfg)
    _, records = prepare_data(cfg)
    train_recs, train_images = split_arrays(cfg, records, "train")
    chosen = set(read_selection_ids(curate_dir / "coreset.jsonl"))
    idx = [i for i, r in enumerate(train_recs) if r.id in chosen]
    val_recs, val_images = split_arrays(cfg, records, "val")
    dcfg = cfg.distill_config()
    result = run_distillation(
        teacher,
        train_images[idx],
        [train_recs[i].id for i in idx],
        dcfg,
        cfg.encoder_config("student"),
        cfg.spatial_spec(),
        cfg.frequency_spec(),
        val_images if len(val_recs) else None,
        [r.id for r in val_recs],
    )
    run_dir = cfg.stage_dir("distill")
    run_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        run_dir / "student.pt",
        cfg.encoder_config("student"),
        {"encoder": result.student, "decoder": result.decoder, "projections": result.projections},
        kind="student",
        meta={"variant": dcfg.name, "teacher_checksum": result.teacher_checksum, "n_train": len(idx)},
    )
    write_log_csv(result.log, run_dir / "log.csv", LOG_COLUMNS)
    summary = {
        "variant": dcfg.name,
        "n_train": len(idx),
        "val_loss": result.val_loss,
        **{f"val_{k}": v for k, v in result.val_components.items()},
        "teacher_checksum": result.teacher_checksum,
    }
    (run_dir / "val.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return _finish(cfg, "distill", run_dir, ["student.pt", "log.csv", "val.json"])


def load_student(cfg: RunConfig):
    run_dir = _require(cfg, "distill", "distill")
    return load_checkpoint(run_dir / "student.pt", expect_config=cfg.encoder_config("student")).encoder()


def vanilla_student(cfg: RunConfig):
    """From-scratch student with the same architecture and the same downstream budget."""
    return build_encoder(cfg.encoder_config("student"), derive_seed(cfg.seed, "vanilla"))


# --------------------------------------------------------------------- adapt


def fit_and_evaluate(cfg: RunConfig, backbone, records, task: str):
    """Train a probe or seg head on the train split; evaluate on the test split."""
    seg = task == "seg"
    train = split_arrays(cfg, records, "train", masks=seg)
    test = split_arrays(cfg, records, "test", masks=seg)
    if not len(test[0]):
        raise ValueError("test split is empty")
    pcfg = cfg.probe_config(task)
    if seg:
        res = train_seg(backbone, train[1], train[2], cfg.seg_config(), pcfg, cfg.seed)
        ev = evaluate(backbone, res.head, test[1], test[2], "seg", pcfg.num_classes, cfg.seed)
    else:
        labels = [r.label for r in train[0]]
        res = train_probe(backbone, train[1], labels, pcfg, cfg.seed)
        ev = evaluate(backbone, res.head, test[1], [r.label for r in test[0]], "cls", pcfg.num_classes, cfg.seed)
    return res, ev


def run_adapt(cfg: RunConfig, force: bool = False) -> StageResult:
    if (res := _reuse(cfg, "adapt", force)) is not None and (not cfg.adapt.vanilla or "comparison.csv" in res.files):
        return res
    student = load_student(cfg)
    _, records = prepare_data(cfg)
    task = cfg.adapt.task
    res, ev = fit_and_evaluate(cfg, student, records, task)
    run_dir = cfg.stage_dir("adapt")
    run_dir.mkdir(parents=True, exist_ok=True)
    torch.save({"task": task, "head": res.head.state_dict()}, run_dir / "head.pt")
    write_log_csv(res.log, run_dir / "log.csv")
    write_eval_csv([ev], run_dir / "eval.csv")
    files = ["head.pt", "log.csv", "eval.csv"]
    if cfg.adapt.vanilla:
        _, ev_v = fit_and_evaluate(cfg, vanilla_student(cfg), records, task)
        write_eval_csv([ev_v], run_dir / "vanilla_eval.csv")
        write_comparison(ev, ev_v, run_dir / "comparison.csv")
        files += ["vanilla_eval.csv", "comparison.csv"]
    return _finish(cfg, "adapt", run_dir, files)


def write_comparison(distilled: EvalResult, vanilla: EvalResult, path: Path) -> Path:
    """EvalResult rows for the distilled model plus the vanilla value and the delta per row."""
    vanilla_rows = {(r["class"], r["metric"]): r["value"] for r in vanilla.rows()}
    return write_eval_csv(
        [distilled],
        path,
        {
            "vanilla": lambda res, row: vanilla_rows[(row["class"], row["metric"])],
            "delta": lambda res, row: row["value"] - vanilla_rows[(row["class"], row["metric"])],
        },
    )


def run_evaluate(cfg: RunConfig) -> EvalResult:
    """Re-score a stored adapt head on the test split (no training)."""
    from .adapt import LinearProbe, build_seg_head

    run_dir = _require(cfg, "adapt", "adapt")
    payload = torch.load(run_dir / "head.pt", map_location="cpu", weights_only=True)
    student = load_student(cfg)
    _, records = prepare_data(cfg)
    task = payload["task"]
    seg = task == "seg"
    test = split_arrays(cfg, records, "test", masks=seg)
    pcfg = cfg.probe_config(task)
    if seg:
        head = build_seg_head(student, cfg.seg_config(), cfg.seed)
        head.load_state_dict(payload["head"])
        ev = evaluate(student, head, test[1], test[2], "seg", pcfg.num_classes, cfg.seed)
    else:
        head = LinearProbe(student.config.dim, pcfg.num_classes, pcfg.readout)
        head.load_state_dict(payload["head"])
        ev = evaluate(student, head, test[1], [r.label for r in test[0]], "cls", pcfg.num_classes, cfg.seed)
    write_eval_csv([ev], run_dir / "evaluate.csv")
    return ev


# ---------------------------------------------------------------------- sweep


SWEEP_COLUMNS = ("variant", "recon", "weighting", "mid_layer", "budget", "strategy", "seed", "metric", "value", "run_dir")


def _metric(cfg: RunConfig, metric: str) -> float:
    if metric == "val_loss":
        val = json.loads((cfg.stage_dir("distill") / "val.json").read_text())["val_loss"]
        if val is None:
            raise ValueError("sweep metric val_loss needs a non-empty val split")
        return float(val)
    adapt_cfg = cfg.with_overrides([f"adapt.task={json.dumps(metric)}", "adapt.vanilla=false"])
    run_adapt(adapt_cfg)
    rows = read_csv(adapt_cfg.stage_dir("adapt") / "eval.csv")
    return float(next(r["value"] for r in rows if r["class"] == "all"))


def sweep_dir(cfg: RunConfig) -> Path:
    import hashlib

    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return cfg.output_root() / "sweep" / hashlib.sha256(f"sweep:{blob}".encode()).hexdigest()[:12]


def sweep_configs(cfg: RunConfig) -> list[tuple[dict, RunConfig]]:
    """(descriptor, config) for every variant of the configured sweep."""
    sw = cfg.sweep
    out = []
    if sw.kind == "ablation":
        for v in ablation_variants(cfg.distill_config(), sw.layers):
            over = [
                f"distill.recon_domains={json.dumps(list(v.recon_domains))}",
                f"distill.dynamic_weighting={json.dumps(v.dynamic_weighting)}",
                f"student.mid_layer={v.mid_layer}",
            ]
            recon, weighting = v.name.split("/")[:2]
            out.append(({"variant": v.name, "recon": recon, "weighting": weighting, "mid_layer": v.mid_layer,
                         "budget": "", "strategy": cfg.coreset.strategy}, cfg.with_overrides(over)))
    else:
        for budget in sw.budgets:
            for strategy in sw.strategies:
                over = [f"coreset.budget={budget}", "coreset.fraction=null", f"coreset.strategy={json.dumps(strategy)}"]
                sub = cfg.with_overrides(over)
                out.append(({"variant": f"{strategy}/{budget}", "recon": "", "weighting": "", "mid_layer": sub.student.mid_layer,
                             "budget": budget, "strategy": strategy}, sub))
    return out


def run_sweep(cfg: RunConfig, force: bool = False) -> Path:
    from .report import plot_sweep

    out_dir = sweep_dir(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_teacher(cfg)
    rows = []
    for desc, sub in sweep_configs(cfg):
        sub.validate()
        run_curate(sub)
        run_distill(sub, force=force)
        value = _metric(sub, cfg.sweep.metric)
        rows.append({**desc, "seed": cfg.seed, "metric": cfg.sweep.metric, "value": value, "run_dir": str(sub.stage_dir("distill"))})
        logger.info("sweep %s: %s = %.5f", desc["variant"], cfg.sweep.metric, value)
    write_log_csv(rows, out_dir / "results.csv", SWEEP_COLUMNS)
    save_snapshot(cfg, "sweep", out_dir / "config.json")
    plot_sweep(rows, cfg.sweep.kind, cfg.sweep.metric, out_dir)
    return out_dir


def stage_config_from_dir(run_dir: Path) -> RunConfig:
    snap = Path(run_dir) / "config.json"
    if not snap.is_file():
        raise ConfigError(f"{run_dir} has no config snapshot")
    return RunConfig.from_dict(json.loads(snap.read_text())["config"]).validate()


def stage_images(cfg: RunConfig, records, split: str) -> np.ndarray:
    return split_arrays(cfg, records, split)[1]
