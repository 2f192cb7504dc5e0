"""Reconstruction-guided block weights from smoothed per-block PSNR/SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ContractError
from .metrics import BlockMetricTracker

# Largest double below 2: the weight's supremum is excluded even when the
# exponential underflows.
_BELOW_TWO = math.nextafter(2.0, 0.0)


@dataclass
class WeightingConfig:
    lambda_w: float = 100.0
    sigma_w: float = 2.0
    w_cap: float = 2.0
    use_psnr: bool = True
    use_ssim: bool = True

    def __post_init__(self):
        if self.sigma_w <= 0:
            raise ContractError("sigma_w must be positive")
        if self.lambda_w < 0:
            raise ContractError("lambda_w must be non-negative")
        if not 1.0 <= self.w_cap <= 2.0:
            raise ContractError("w_cap must lie in [1, 2]")


@dataclass
class Deviations:
    psnr_max: float
    ssim_max: float
    delta_p: dict[int, float]
    delta_s: dict[int, float]


def deviations(trackers: list[BlockMetricTracker]) -> Deviations:
    """Gap of every block to the best smoothed PSNR and SSIM."""
    if not trackers:
        raise ContractError("no trackers supplied")
    for t in trackers:
        if not t.initialized:
            raise ContractError(f"tracker for block {t.block_id} has no observations yet")
    p_max = max(t.psnr_ema for t in trackers)
    s_max = max(t.ssim_ema for t in trackers)
    return Deviations(p_max, s_max,
                      {t.block_id: p_max - t.psnr_ema for t in trackers},
                      {t.block_id: s_max - t.ssim_ema for t in trackers})


def block_weight(delta_p: float, delta_s: float, cfg: WeightingConfig = WeightingConfig()) -> float:
    """``2 - exp(-(dp^2 + lambda * ds^2) / (2 sigma^2))``, then capped at ``w_cap``.

    ``use_psnr`` / ``use_ssim`` switch off the respective deviation term.
    """
    if delta_p < 0 or delta_s < 0:
        raise ContractError("deviations must be non-negative")
    dp = delta_p if cfg.use_psnr else 0.0
    ds = delta_s if cfg.use_ssim else 0.0
    w = 2.0 - math.exp((dp * dp + cfg.lambda_w * ds * ds) / (-2.0 * cfg.sigma_w ** 2))
    return min(w, _BELOW_TWO, cfg.w_cap)


def block_weights(trackers: list[BlockMetricTracker], cfg: WeightingConfig = WeightingConfig()) -> dict[int, float]:
    """Weights for every initialised tracker; blocks not yet observed are left out."""
    ready = [t for t in trackers if t.initialized]
    if not ready:
        return {}
    dev = deviations(ready)
    return {b: block_weight(dev.delta_p[b], dev.delta_s[b], cfg) for b in dev.delta_p}
