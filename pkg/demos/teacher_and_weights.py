"""The two regularisers on their own, without any rendering.

1. The momentum teacher closes its gap to a frozen student by exactly a
   factor m per update.
2. The consistency loss between student and teacher attributes is zero when
   they coincide, and grows as the student drifts.
3. Block weights grow from 1 towards 2 as a block falls behind the best one.
"""

import numpy as np

from flatsplat.decoder import PARAM_NAMES, DecoderPair, DecoderParams, consistency_loss, momentum_update
from flatsplat.scene import FEATURE_DIM
from flatsplat.weighting import WeightingConfig, block_weight

rng = np.random.default_rng(0)

pair = DecoderPair(DecoderParams.init(rng, 2), DecoderParams.init(rng, 2), momentum=0.9)


def gap():
    return max(np.abs(getattr(pair.teacher, n) - getattr(pair.student, n)).max() for n in PARAM_NAMES)


print("teacher tracking a frozen student (m = 0.9)")
g0 = gap()
for step in range(1, 11):
    momentum_update(pair)
    print(f"  step {step:2d}: gap ratio {gap() / g0:.10f}   0.9^{step} = {0.9 ** step:.10f}")

inputs = np.hstack([rng.normal(0, 0.3, (16, FEATURE_DIM)), rng.uniform(0, 1, (16, 1)),
                    np.tile([[1.0, 0.0]], (16, 1))])
same = DecoderPair.from_student(pair.student.copy())
print(f"\nconsistency with teacher == student: {float(consistency_loss(same, inputs, 0.03)):.3g}")
for noise in (0.01, 0.05, 0.2):
    drifted = same.student.copy()
    for n in PARAM_NAMES:
        getattr(drifted, n)[...] += rng.normal(0, noise, getattr(drifted, n).shape)
    val = float(consistency_loss(DecoderPair(drifted, same.teacher), inputs, 0.03))
    print(f"  student perturbed by N(0, {noise}^2): {val:.3e}")

cfg = WeightingConfig()
print(f"\nblock weight, sigma_w={cfg.sigma_w}, lambda_w={cfg.lambda_w}")
for dp in (0.0, 0.5, 1.0, 2.0, 4.0, 8.0):
    row = "  ".join(f"{block_weight(dp, ds, cfg):.4f}" for ds in (0.0, 0.05, 0.1))
    print(f"  PSNR gap {dp:3.1f} dB -> w at SSIM gap 0 / 0.05 / 0.1: {row}")
