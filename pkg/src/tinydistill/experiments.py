"""Multi-seed comparison experiments shared by scripts/ and the acceptance suite.

Both experiments train one teacher on one phantom set, then repeat the
student-side work for each seed so that only the compared factor changes.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .adapt import evaluate, train_probe, train_seg
from .config import RunConfig
from .coreset import curate, random_selection
from .data import by_split, generate_phantoms, load_images, load_masks, stratified_split
from .distill import run_distillation
from .encoder import build_encoder, embed_images, fit_teacher
from .seeding import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class Bench:
    """Phantom splits as arrays plus a trained teacher."""

    cfg: RunConfig
    train_ids: list[str]
    train: np.ndarray
    train_masks: np.ndarray
    train_labels: np.ndarray
    val_ids: list[str]
    val: np.ndarray
    test: np.ndarray
    test_masks: np.ndarray
    test_labels: np.ndarray
    train_organs: list = field(default_factory=list)
    teacher: object = None
    traces: list = field(default_factory=list)
    seconds: float = 0.0


def build_bench(cfg: RunConfig, out_dir: str | Path, data_seed: int = 0) -> Bench:
    t0 = time.perf_counter()
    d = cfg.data
    size = (d.image_size, d.image_size)
    records = generate_phantoms(d.phantoms, d.classes, size, data_seed, Path(out_dir) / "phantoms")
    records = stratified_split(records, d.split_ratios, data_seed)
    tr, va, te = (by_split(records, s) for s in ("train", "val", "test"))
    bench = Bench(
        cfg,
        [r.id for r in tr],
        load_images(tr, size),
        load_masks(tr, size),
        np.array([r.label for r in tr]),
        [r.id for r in va],
        load_images(va, size),
        load_images(te, size),
        load_masks(te, size),
        np.array([r.label for r in te]),
    )
    bench.train_organs = [r.organ for r in tr]
    t = cfg.teacher
    res = fit_teacher(
        bench.train,
        bench.train_ids,
        cfg.encoder_config("teacher"),
        epochs=t.epochs,
        seed=data_seed,
        batch_size=t.batch_size,
        lr=t.lr,
        weight_decay=t.weight_decay,
        sspec=cfg.spatial_spec(),
        fspec=cfg.frequency_spec(),
        trace_epochs=t.trace_epochs,
    )
    bench.teacher, bench.traces = res.encoder, res.traces
    bench.seconds = time.perf_counter() - t0
    logger.info("bench ready in %.1fs (%d train / %d val / %d test)", bench.seconds, len(bench.train), len(bench.val), len(bench.test))
    return bench


def downstream(bench: Bench, backbone, seed: int) -> dict:
    """Linear-probe accuracy and FPN Dice on the test split."""
    cfg = bench.cfg
    pcfg = cfg.probe_config("cls")
    probe = train_probe(backbone, bench.train, bench.train_labels, pcfg, seed)
    acc = evaluate(backbone, probe.head, bench.test, bench.test_labels, "cls", pcfg.num_classes, seed).aggregate
    scfg = cfg.probe_config("seg")
    seg = train_seg(backbone, bench.train, bench.train_masks, cfg.seg_config(), scfg, seed)
    dsc = evaluate(backbone, seg.head, bench.test, bench.test_masks, "seg", scfg.num_classes, seed).aggregate
    return {"accuracy": acc, "dice": dsc}


def vanilla_gap(bench: Bench, seeds: Sequence[int]) -> dict:
    """Distilled vs from-scratch student, same architecture and same downstream budget, per seed."""
    cfg = bench.cfg
    rows = []
    for seed in seeds:
        t0 = time.perf_counter()
        dcfg = dataclasses.replace(cfg.distill_config(), seed=seed)
        student = run_distillation(
            bench.teacher, bench.train, bench.train_ids, dcfg, cfg.encoder_config("student"), cfg.spatial_spec(), cfg.frequency_spec()
        ).student
        vanilla = build_encoder(cfg.encoder_config("student"), derive_seed(seed, "vanilla"))
        dist_m, van_m = downstream(bench, student, seed), downstream(bench, vanilla, seed)
        row = {"seed": seed, **{f"distilled_{k}": v for k, v in dist_m.items()}, **{f"vanilla_{k}": v for k, v in van_m.items()}}
        row.update({f"delta_{k}": dist_m[k] - van_m[k] for k in dist_m})
        row["seconds"] = time.perf_counter() - t0
        rows.append(row)
        logger.info("vanilla-gap seed %d: %s", seed, json.dumps({k: round(v, 4) for k, v in row.items()}))
    means = {k: float(np.mean([r[k] for r in rows])) for k in rows[0] if k != "seed"}
    return {"rows": rows, "mean": means}


def coreset_benefit(bench: Bench, seeds: Sequence[int], fraction: float = 0.25) -> dict:
    """Distillation validation loss after training on a curated vs a random subset of equal size."""
    cfg = bench.cfg
    c = cfg.coreset
    feats = embed_images(bench.teacher, bench.train)
    budget = max(1, round(fraction * len(bench.train)))
    index = {sid: i for i, sid in enumerate(bench.train_ids)}
    rows = []
    for seed in seeds:
        t0 = time.perf_counter()
        selection, _, _ = curate(bench.train_ids, feats, bench.traces, budget, cfg.k1_for(bench.train_organs), c.k2, c.alpha, c.beta, seed)
        subsets = {"curated": selection.ids, "random": random_selection(bench.train_ids, budget, seed)}
        row = {"seed": seed, "budget": budget}
        for name, ids in subsets.items():
            idx = sorted(index[i] for i in ids)
            dcfg = dataclasses.replace(cfg.distill_config(), seed=seed)
            res = run_distillation(
                bench.teacher,
                bench.train[idx],
                [bench.train_ids[i] for i in idx],
                dcfg,
                cfg.encoder_config("student"),
                cfg.spatial_spec(),
                cfg.frequency_spec(),
                bench.val,
                bench.val_ids,
            )
            row[f"{name}_val_loss"] = res.val_loss
        row["delta"] = row["random_val_loss"] - row["curated_val_loss"]
        row["seconds"] = time.perf_counter() - t0
        rows.append(row)
        logger.info("coreset seed %d: %s", seed, json.dumps(row))
    means = {k: float(np.mean([r[k] for r in rows])) for k in rows[0] if k not in ("seed", "budget")}
    return {"rows": rows, "mean": means, "budget": budget}


def write_json(result: dict, path: Optional[str | Path]) -> None:
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(result, indent=2) + "\n")
