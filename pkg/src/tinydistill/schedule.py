"""Linear-warmup + polynomial-decay learning rate."""

from __future__ import annotations


def warmup_poly(step: int, total: int, lr0: float, warmup: int, power: float = 0.9) -> float:
    if total <= warmup:
        raise ValueError(f"total steps ({total}) must exceed warmup ({warmup})")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return lr0 * ((step + 1) / warmup)
    frac = 1.0 - (step - warmup) / (total - warmup)
    return lr0 * max(frac, 0.0) ** power


def default_warmup(total: int, fraction: float = 0.05) -> int:
    """5% of the run, at least one step, always leaving one decay step."""
    return min(max(1, round(fraction * total)), max(total - 1, 0))


def set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
