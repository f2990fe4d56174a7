"""Desk-scale distillation of a masked-image-modeling ViT into a compact student.

Pipeline: synthetic speckle phantoms -> dual-masked teacher pretraining (with
per-sample gradient traces) -> feature/gradient coreset curation ->
consistency-weighted head distillation with mid-layer reconstruction ->
linear-probe and FPN-head adaptation.
"""

__version__ = "0.1.0"
