"""Post-search fine-grained replacement training.

Rather than swapping a baseline operator for its polynomial/average target in
one step, each converted slot blends the two as (1-s) * baseline + s * target
and training alternates between SGD parameter updates and increments of the
replacement ratio s.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, cross_entropy, stack_weighted
from .data import batches
from .optim import SGD
from .supernet import Supernet


@dataclass(frozen=True)
class ReplacementSchedule:
    """Monotone nondecreasing s in [0, 1]: s(epoch) = clamp(epoch / ramp_epochs)."""

    ramp_epochs: int
    start: float = 0.0
    end: float = 1.0

    def __post_init__(self):
        if self.ramp_epochs <= 0:
            raise ValueError("ramp_epochs must be positive")
        if not 0.0 <= self.start <= self.end <= 1.0:
            raise ValueError("need 0 <= start <= end <= 1")

    def s(self, epoch: int) -> float:
        frac = min(max(epoch / self.ramp_epochs, 0.0), 1.0)
        return self.start + (self.end - self.start) * frac


def forward_blend(
    sn: Supernet, x: np.ndarray, baseline: list[int], target: list[int], s: float
) -> Tensor:
    """Per-layer blend (1-s) * baseline_op + s * target_op through the net."""
    h = Tensor(x)
    w = Tensor(np.array([1.0 - s, s]))
    for block, cb, ct in zip(sn.blocks, baseline, target):
        if cb == ct or s == 0.0:
            h = block.forward_fixed(h, cb)
        elif s == 1.0:
            h = block.forward_fixed(h, ct)
        else:
            h = stack_weighted([block.forward_fixed(h, cb), block.forward_fixed(h, ct)], w)
    return sn._head(h)


def finetune_replacement(
    sn: Supernet,
    baseline: list[int],
    target: list[int],
    data_trn,
    data_val,
    schedule: ReplacementSchedule,
    epochs: int,
    batch: int = 32,
    lr: float = 0.02,
    momentum: float = 0.9,
    seed: int = 0,
) -> list[dict]:
    """Alternate SGD updates and s increments; returns per-epoch history."""
    xt, yt = data_trn
    xv, yv = data_val
    opt = SGD(sn.weight_params(), lr=lr, momentum=momentum)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        s = schedule.s(epoch)
        for bx, by in batches(xt, yt, batch, rng):
            loss = cross_entropy(forward_blend(sn, bx, baseline, target, s), by)
            loss.backward()
            opt.step()
            opt.zero_grad()
        logits = forward_blend(sn, xv, baseline, target, schedule.s(epoch + 1))
        acc = float((logits.data.argmax(axis=1) == yv).mean())
        history.append({"epoch": epoch, "s": s, "val_acc": acc})
    return history
