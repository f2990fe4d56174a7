"""Distilled vs from-scratch student on 512 phantoms: probe accuracy and seg Dice over 5 seeds."""

import argparse
import logging
import time

import torch

from tinydistill.config import load_config
from tinydistill.experiments import build_bench, vanilla_gap, write_json


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default="runs/vanilla_gap")
    ap.add_argument("overrides", nargs="*", help="dotted overrides, e.g. distill.epochs=5")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    cfg = load_config(args.config, args.overrides)
    t0 = time.perf_counter()
    bench = build_bench(cfg, args.out)
    result = vanilla_gap(bench, range(args.seeds))
    result["seconds"] = time.perf_counter() - t0
    write_json(result, f"{args.out}/result.json")
    m = result["mean"]
    print(f"accuracy: distilled {m['distilled_accuracy']:.4f} vanilla {m['vanilla_accuracy']:.4f} delta {m['delta_accuracy']:+.4f}")
    print(f"dice:     distilled {m['distilled_dice']:.4f} vanilla {m['vanilla_dice']:.4f} delta {m['delta_dice']:+.4f}")
    print(f"total {result['seconds']:.0f}s")


if __name__ == "__main__":
    main()
