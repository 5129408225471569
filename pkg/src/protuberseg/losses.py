"""Dice and smoothed cross-entropy losses, and the per-step objectives.

Dice uses the squared-denominator form: per channel,
1 - (2*sum(p*t) + d) / (sum(p^2) + sum(t^2) + d), averaged over channels,
with d a small numerical guard. Cross-entropy is binary, against the
symmetrically smoothed target t' = t*(1-eps) + eps/2, averaged over
voxels.
"""

from __future__ import annotations

from dataclasses import dataclass

from .tensornet import (Tensor, add, clamp, div, log, mul, narrow_channels,
                        tmean, tsum)

DICE_GUARD = 1e-5
STEP2_SMOOTHING = 0.01
CE_PROB_FLOOR = 1e-7  # keeps log() finite when a sigmoid saturates


@dataclass
class LossConfig:
    dice_weight: float = 0.5
    ce_weight: float = 0.5
    smoothing: float = 0.0           # label smoothing factor
    dice_guard: float = DICE_GUARD
    squared_denominator: bool = True

    def __post_init__(self):
        if self.dice_weight < 0 or self.ce_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if not 0.0 <= self.smoothing < 0.5:
            raise ValueError("smoothing must be in [0, 0.5)")


def _check_pair(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs "
                         f"target {target.shape}")


def dice_loss(pred: Tensor, target: Tensor, guard: float = DICE_GUARD,
              squared: bool = True) -> Tensor:
    """Per-channel dice loss averaged over channels; inputs (B, C, ...)."""
    _check_pair(pred, target)
    n_ch = pred.shape[1]
    total = None
    for c in range(n_ch):
        p = narrow_channels(pred, c, c + 1)
        t = narrow_channels(target, c, c + 1)
        inter = tsum(mul(p, t))
        if squared:
            denom = add(tsum(mul(p, p)), tsum(mul(t, t)))
        else:
            denom = add(tsum(p), tsum(t))
        frac = div(2.0 * inter + guard, denom + guard)
        term = 1.0 - frac
        total = term if total is None else add(total, term)
    return mul(total, 1.0 / n_ch)


def ce_loss(pred: Tensor, target: Tensor, smoothing: float = 0.0) -> Tensor:
    """Binary cross-entropy against the smoothed target, voxel mean."""
    _check_pair(pred, target)
    if not 0.0 <= smoothing < 0.5:
        raise ValueError("smoothing must be in [0, 0.5)")
    t = mul(target, 1.0 - smoothing) + smoothing / 2.0
    p = clamp(pred, CE_PROB_FLOOR, 1.0 - CE_PROB_FLOOR)
    nll = -(mul(t, log(p)) + mul(1.0 - t, log(1.0 - p)))
    return tmean(nll)


def combined_loss(pred: Tensor, target: Tensor,
                  cfg: LossConfig = LossConfig()) -> Tensor:
    d = dice_loss(pred, target, cfg.dice_guard, cfg.squared_denominator)
    c = ce_loss(pred, target, cfg.smoothing)
    return add(mul(d, cfg.dice_weight), mul(c, cfg.ce_weight))


def step1_loss(base_out: Tensor, target_kt: Tensor,
               cfg: LossConfig = LossConfig()) -> Tensor:
    """Equal-weight dice + cross-entropy over both base channels.

    base_out, target_kt: (B, 2, ...) with channels (kidney, tumor).
    """
    if base_out.shape[1] != 2 or target_kt.shape[1] != 2:
        raise ValueError("step 1 expects two channels (kidney, tumor)")
    return combined_loss(base_out, target_kt, cfg)


def step2_loss(prot_out: Tensor, target: Tensor) -> Tensor:
    """Cross-entropy only, label smoothing 0.01."""
    return ce_loss(prot_out, target, STEP2_SMOOTHING)


def step3_loss(fusion_out: Tensor, base_out: Tensor, target_kt: Tensor,
               cfg: LossConfig = LossConfig()) -> Tensor:
    """Fusion tumor loss plus the base losses kept as intermediate
    supervision; unweighted sum of the two terms."""
    tumor_t = narrow_channels(target_kt, 1, 2)
    fusion_term = combined_loss(fusion_out, tumor_t, cfg)
    base_term = step1_loss(base_out, target_kt, cfg)
    return add(fusion_term, base_term)
