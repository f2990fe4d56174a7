"""Static figures and a Markdown summary from finished run directories."""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)

FORMATS = ("png", "svg")


class NoRunsError(RuntimeError):
    pass


def _save(fig, out_dir: Path, stem: str) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for ext in FORMATS:
        p = out_dir / f"{stem}.{ext}"
        fig.savefig(p, dpi=120, bbox_inches="tight")
        paths.append(p)
    plt.close(fig)
    return paths


def _read(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def plot_training_curves(runs: Sequence[tuple[str, list[dict]]], out_dir: Path) -> list[Path]:
    """loss.{png,svg} and lr.{png,svg}, one line per run."""
    paths = []
    for column, stem, ylabel in (("loss_total", "loss", "training loss"), ("lr", "lr", "learning rate")):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, rows in runs:
            xs = [int(r["epoch"]) for r in rows]
            ax.plot(xs, [float(r[column]) for r in rows], marker="o", ms=3, label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        if len(runs) <= 12:
            ax.legend(fontsize=7)
        paths += _save(fig, out_dir, stem)
    return paths


def plot_sweep(rows: Sequence[dict], kind: str, metric: str, out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    if kind == "ablation":
        layer_rows = sorted((r for r in rows if "/L" in str(r["variant"])), key=lambda r: int(r["mid_layer"]))
        grid_rows = [r for r in rows if "/L" not in str(r["variant"])]
        fig, (left, right) = plt.subplots(1, 2, figsize=(11, 4))
        left.plot([int(r["mid_layer"]) for r in layer_rows], [float(r["value"]) for r in layer_rows], marker="o")
        left.set_xlabel("reconstruction layer")
        left.set_ylabel(metric)
        left.set_title("S+F-MIM, dynamic weighting")
        recon = list(dict.fromkeys(r["recon"] for r in grid_rows))
        width = 0.38
        for k, weighting in enumerate(("fixed", "dynamic")):
            vals = [next((float(r["value"]) for r in grid_rows if r["recon"] == rc and r["weighting"] == weighting), float("nan")) for rc in recon]
            right.bar([i + (k - 0.5) * width for i in range(len(recon))], vals, width, label=weighting)
        right.set_xticks(range(len(recon)), recon)
        right.set_ylabel(metric)
        right.set_title("reconstruction domain x weighting")
        right.legend()
        paths = _save(fig, out_dir, "ablation")
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.plot([int(r["mid_layer"]) for r in layer_rows], [float(r["value"]) for r in layer_rows], marker="o")
        ax.set_xlabel("reconstruction layer")
        ax.set_ylabel(metric)
        return paths + _save(fig, out_dir, "metric_vs_layer")
    by_strategy: dict[str, list[tuple[int, float]]] = defaultdict(list)
    for r in rows:
        by_strategy[r["strategy"]].append((int(r["budget"]), float(r["value"])))
    fig, ax = plt.subplots(figsize=(5, 4))
    for strategy, pts in sorted(by_strategy.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=strategy)
    ax.set_xlabel("subset size")
    ax.set_ylabel(metric)
    ax.legend()
    return _save(fig, out_dir, "metric_vs_subset")


def _md_table(rows: Sequence[dict], columns: Sequence[str]) -> list[str]:
    out = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for r in rows:
        cells = []
        for c in columns:
            v = r.get(c, "")
            try:
                cells.append(f"{float(v):.4g}" if c not in ("variant", "run", "mid_layer", "budget", "strategy", "class") else str(v))
            except (TypeError, ValueError):
                cells.append(str(v))
        out.append("| " + " | ".join(cells) + " |")
    return out


def build_report(root: str | Path, out_dir: Optional[str | Path] = None, masks: bool = True) -> Path:
    """Scan an output root for finished stages and emit figures plus summary.md."""
    root = Path(root)
    out_dir = Path(out_dir) if out_dir else root / "report"
    distill_runs = sorted(p.parent for p in root.glob("distill/*/log.csv"))
    adapt_runs = sorted(p.parent for p in root.glob("adapt/*/eval.csv"))
    sweeps = sorted(p.parent for p in root.glob("sweep/*/results.csv"))
    if not (distill_runs or adapt_runs or sweeps):
        raise NoRunsError(f"no finished runs under {root}")
    lines = ["# Run summary", "", f"Output root: `{root}`", ""]
    produced: list[Path] = []
    if distill_runs:
        curves, table = [], []
        for run in distill_runs:
            rows = _read(run / "log.csv")
            val = json.loads((run / "val.json").read_text()) if (run / "val.json").is_file() else {}
            label = f"{val.get('variant', '?')} [{run.name}]"
            curves.append((label, rows))
            last = rows[-1] if rows else {}
            table.append({"run": run.name, "variant": val.get("variant", ""), "epochs": len(rows),
                          "final loss": last.get("loss_total", ""), "mean s_cons": last.get("mean_s_cons", ""),
                          "val loss": val.get("val_loss", "")})
        produced += plot_training_curves(curves, out_dir)
        lines += ["## Distillation runs", "", *_md_table(table, ["run", "variant", "epochs", "final loss", "mean s_cons", "val loss"]),
                  "", "![loss](loss.png) ![lr](lr.png)", ""]
    if adapt_runs:
        table = []
        for run in adapt_runs:
            cmp_path = run / "comparison.csv"
            for r in _read(cmp_path if cmp_path.is_file() else run / "eval.csv"):
                if r["class"] == "all":
                    table.append({"run": run.name, "task": r["task"], "metric": r["metric"], "value": r["value"],
                                  "vanilla": r.get("vanilla", ""), "delta": r.get("delta", "")})
        lines += ["## Downstream evaluation", "", *_md_table(table, ["run", "task", "metric", "value", "vanilla", "delta"]), ""]
    for sweep in sweeps:
        rows = _read(sweep / "results.csv")
        kind = json.loads((sweep / "config.json").read_text())["config"]["sweep"]["kind"]
        metric = rows[0]["metric"] if rows else "value"
        produced += plot_sweep(rows, kind, metric, out_dir / f"sweep-{sweep.name}")
        lines += [f"## Sweep `{sweep.name}` ({kind}, metric {metric})", "",
                  *_md_table(rows, ["variant", "mid_layer", "budget", "strategy", "value"]), ""]
    if masks:
        produced += _mask_examples(root, out_dir)
    summary = out_dir / "summary.md"
    out_dir.mkdir(parents=True, exist_ok=True)
    summary.write_text("\n".join(lines) + "\n")
    logger.info("report: %d figures, %s", len(produced), summary)
    return summary


def _mask_examples(root: Path, out_dir: Path) -> list[Path]:
    """One spatial and one frequency mask map for the first image of the first data run."""
    from .data import load_image, load_manifest
    from .masking import FrequencyMaskSpec, SpatialMaskSpec, make_view_pair, mask_png

    manifests = sorted(root.glob("data/*/manifest.jsonl"))
    if not manifests:
        return []
    snap = json.loads((manifests[0].parent / "config.json").read_text())["config"]
    size = snap["data"]["image_size"]
    rec = load_manifest(manifests[0])[0]
    image = load_image(rec.path, (size, size))
    m = snap["masking"]
    spa, freq = make_view_pair(
        image,
        SpatialMaskSpec(patch_size=snap["student"]["patch_size"], mask_ratio=m["spatial_ratio"]),
        FrequencyMaskSpec(m["num_bands"], m["bands_per_mask"], m["frequency_ratio"], m["center_preserve"]),
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    return [mask_png(spa, out_dir / "mask_spatial.png"), mask_png(freq, out_dir / "mask_frequency.png")]
