"""Reconstruction-domain x weighting grid plus a mid-layer sweep, with plots.

Thin wrapper over ``tinydistill sweep --kind ablation``; extra arguments are
passed through as dotted overrides (``--distill.epochs=2``).
"""

import sys

import torch

from tinydistill.cli import run

if __name__ == "__main__":
    torch.set_num_threads(1)
    sys.exit(run(["sweep", "--kind", "ablation", *sys.argv[1:]]))
