"""Per-step objectives for recursive training.

Three variants:

``final_step_only``
    mean CE of the last step.
``each_step``
    sum over steps of mean CE.
``monotonic``
    step 1 uses plain mean CE; at later steps a token whose CE rose above
    its previous-step CE has its loss multiplied by ``beta``. The previous
    step's losses only pick which tokens get penalised and carry no gradient
    through that comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import Tensor

LOSS_VARIANTS = ("final_step_only", "each_step", "monotonic")


@dataclass
class LossConfig:
    variant: str = "monotonic"
    beta: float = 1.5

    def __post_init__(self):
        if self.variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}; expected one of {LOSS_VARIANTS}")
        if self.variant == "monotonic" and not self.beta > 1:
            raise ValueError(f"beta must be > 1 for the monotonic loss, got {self.beta}")


@dataclass
class LossBreakdown:
    per_step_raw: list[float] = field(default_factory=list)
    per_step_adjusted: list[float] = field(default_factory=list)
    degraded_fraction: list[float] = field(default_factory=list)
    total: float = 0.0

    def to_dict(self) -> dict:
        return {
            "per_step_raw": self.per_step_raw,
            "per_step_adjusted": self.per_step_adjusted,
            "degraded_fraction": self.degraded_fraction,
            "total": self.total,
        }


def monotonic_adjust(cur: Tensor, prev: Tensor, beta: float) -> Tensor:
    """``beta * cur`` where ``cur > prev`` (strictly), else ``cur``."""
    if cur.shape != prev.shape:
        raise ValueError(f"monotonic_adjust: shape mismatch {tuple(cur.shape)} vs {tuple(prev.shape)}")
    degraded = cur.detach() > prev.detach()
    return torch.where(degraded, cur * beta, cur)


def masked_mean(x: Tensor, mask: Tensor) -> Tensor:
    return (x * mask).sum() / mask.sum()


def total_loss(
    step_token_losses: Sequence[Tensor], mask: Tensor, config: LossConfig
) -> tuple[Tensor, LossBreakdown]:
    """Combine per-token CE from every recursion step into one scalar.

    ``step_token_losses[r]`` has the same shape as ``mask``; means are taken
    over masked tokens. ``degraded_fraction[0]`` is always 0.
    """
    if not step_token_losses:
        raise ValueError("total_loss needs at least one step")
    mask = mask.to(step_token_losses[0].dtype)
    if mask.sum() == 0:
        raise ValueError("total_loss: loss mask selects no tokens")
    maskb = mask > 0
    n = int(maskb.sum())

    raw = [masked_mean(l, mask) for l in step_token_losses]
    adjusted = [raw[0]]
    degraded = [0.0]
    for r in range(1, len(step_token_losses)):
        cur, prev = step_token_losses[r], step_token_losses[r - 1]
        adjusted.append(masked_mean(monotonic_adjust(cur, prev, config.beta), mask))
        fired = (cur.detach() > prev.detach()) & maskb
        degraded.append(int(fired.sum()) / n)

    if config.variant == "final_step_only":
        total = raw[-1]
    elif config.variant == "each_step":
        total = torch.stack(raw).sum()
    else:
        total = torch.stack(adjusted).sum()

    breakdown = LossBreakdown(
        per_step_raw=[float(x.detach()) for x in raw],
        per_step_adjusted=[float(x.detach()) for x in adjusted],
        degraded_fraction=degraded,
        total=float(total.detach()),
    )
    return total, breakdown
