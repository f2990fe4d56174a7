"""``tinydistill`` command line.

Every command takes ``--config FILE`` (a JSON config or a stored ``config.json``
snapshot) plus any number of dotted overrides such as ``--distill.lambda_recon=0.5``.
The configuration is validated before anything is written.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from . import pipeline
from .config import ConfigError, RunConfig, load_config

logger = logging.getLogger("tinydistill")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tinydistill", description="Coreset-curated, consistency-gated distillation at desk scale.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", default=None, help="JSON config or stored snapshot")
        p.add_argument("--force", action="store_true", help="recompute even if the run directory is complete")
        return p

    add("pretrain-teacher", "train the teacher with masked reconstruction and record gradient traces")
    p = add("curate", "select a coreset from teacher features and traces")
    p.add_argument("--strategy", choices=("curated", "random"), default=None)
    p.add_argument("--budget", type=int, default=None)
    add("distill", "distill a student on the coreset")
    p = add("adapt", "train a probe or segmentation head and evaluate on the test split")
    p.add_argument("--task", choices=("cls", "seg"), default=None)
    p.add_argument("--vanilla", action="store_true", help="also run a from-scratch student and emit a delta column")
    p = add("evaluate", "re-score a stored adapt head on the test split")
    p.add_argument("--task", choices=("cls", "seg"), default=None)
    p = sub.add_parser("report", help="write figures and a Markdown summary for finished runs")
    p.add_argument("root", nargs="?", default=None, help="output root to scan (default: configured root)")
    p.add_argument("--out", default=None, help="report directory (default: ROOT/report)")
    p.add_argument("--config", default=None)
    p = add("sweep", "run an ablation or subset-size sweep and plot it")
    p.add_argument("--kind", choices=("ablation", "subset"), default=None)
    p.add_argument("--metric", choices=("val_loss", "cls", "seg"), default=None)
    return ap


def _overrides(args: argparse.Namespace, extra: Sequence[str]) -> list[str]:
    bad = [e for e in extra if not (e.startswith("--") and "=" in e)]
    if bad:
        raise ConfigError(f"unrecognised arguments {bad}; overrides look like --section.key=value")
    out = list(extra)
    flag_map = {
        "strategy": "coreset.strategy",
        "task": "adapt.task",
        "kind": "sweep.kind",
        "metric": "sweep.metric",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            out.append(f"{key}={json.dumps(value)}")
    if getattr(args, "budget", None) is not None:
        out += [f"coreset.budget={args.budget}", "coreset.fraction=null"]
    if getattr(args, "vanilla", False):
        out.append("adapt.vanilla=true")
    return out


def _emit(result: pipeline.StageResult) -> None:
    print(json.dumps({"stage": result.stage, "run_dir": str(result.run_dir), "files": result.files, "reused": result.reused}))


def run(argv: Optional[Sequence[str]] = None) -> int:
    args, extra = _parser().parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg: RunConfig = load_config(args.config, _overrides(args, extra))
        cmd = args.command
        if cmd == "pretrain-teacher":
            _emit(pipeline.run_teacher(cfg, args.force))
        elif cmd == "curate":
            _emit(pipeline.run_curate(cfg, args.force))
        elif cmd == "distill":
            _emit(pipeline.run_distill(cfg, args.force))
        elif cmd == "adapt":
            _emit(pipeline.run_adapt(cfg, args.force))
        elif cmd == "evaluate":
            ev = pipeline.run_evaluate(cfg)
            print(json.dumps({"task": ev.task, "metric": ev.metric, "aggregate": ev.aggregate, "per_class": ev.per_class, "n": ev.n_samples}))
        elif cmd == "report":
            from .report import build_report

            root = args.root or cfg.output_root()
            print(build_report(root, args.out))
        elif cmd == "sweep":
            print(pipeline.run_sweep(cfg, args.force))
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # reported, never a traceback, unless verbose
        if args.verbose:
            logger.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
