"""Curated vs random 25% subset: distillation validation loss over 5 seeds."""

import argparse
import logging
import time

import torch

from tinydistill.config import load_config
from tinydistill.experiments import build_bench, coreset_benefit, write_json


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--fraction", type=float, default=0.25)
    ap.add_argument("--out", default="runs/coreset_benefit")
    ap.add_argument("overrides", nargs="*", help="dotted overrides, e.g. teacher.epochs=5")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    cfg = load_config(args.config, args.overrides)
    t0 = time.perf_counter()
    bench = build_bench(cfg, args.out)
    result = coreset_benefit(bench, range(args.seeds), args.fraction)
    result["seconds"] = time.perf_counter() - t0
    write_json(result, f"{args.out}/result.json")
    m = result["mean"]
    print(f"val loss: curated {m['curated_val_loss']:.5f} random {m['random_val_loss']:.5f} (budget {result['budget']})")
    print(f"total {result['seconds']:.0f}s")


if __name__ == "__main__":
    main()
