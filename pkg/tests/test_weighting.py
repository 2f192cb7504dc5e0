import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flatsplat.errors import ContractError
from flatsplat.metrics import BlockMetricTracker
from flatsplat.weighting import WeightingConfig, block_weight, block_weights, deviations


def _tr(b, p, s=0.9):
    return BlockMetricTracker(b, 0.9, p, s, True)


def test_single_block_zero_deviation():
    d = deviations([_tr(0, 25.0)])
    assert d.delta_p == {0: 0.0} and d.delta_s == {0: 0.0}


def test_psnr_deviation_example():
    d = deviations([_tr(0, 20.0), _tr(1, 23.0)])
    assert d.delta_p == {0: 3.0, 1: 0.0}


def test_deviation_oracle_random():
    rng = np.random.default_rng(0)
    ts = [_tr(i, rng.uniform(15, 35), rng.uniform(0.5, 1)) for i in range(8)]
    d = deviations(ts)
    pm = max(t.psnr_ema for t in ts)
    sm = max(t.ssim_ema for t in ts)
    for t in ts:
        assert d.delta_p[t.block_id] == pm - t.psnr_ema
        assert d.delta_s[t.block_id] == sm - t.ssim_ema


def test_uninitialised_tracker_rejected():
    with pytest.raises(ContractError):
        deviations([_tr(0, 20.0), BlockMetricTracker(1)])
    with pytest.raises(ContractError):
        deviations([])
    # block_weights skips blocks that have not been observed yet
    assert block_weights([_tr(0, 20.0), BlockMetricTracker(1)]) == {0: 1.0}
    assert block_weights([BlockMetricTracker(1)]) == {}


def test_weight_examples():
    assert block_weight(0.0, 0.0) == 1.0
    assert block_weight(1e6, 0.0) < 2.0
    assert block_weight(1e6, 0.0) == pytest.approx(2.0, abs=1e-15)
    for lam in (0.0, 1.0, 100.0, 1e4):
        w = block_weight(2.0, 0.0, WeightingConfig(lambda_w=lam, sigma_w=2.0))
        assert abs(w - (2 - math.exp(-0.5))) <= 1e-9
        assert abs(w - 1.393469) < 1e-6


def test_weight_reductions_and_cap():
    psnr_only = WeightingConfig(lambda_w=0.0)
    assert block_weight(1.0, 0.3, psnr_only) == block_weight(1.0, 0.0, psnr_only)
    ssim_only = WeightingConfig(use_psnr=False)
    assert block_weight(5.0, 0.1, ssim_only) == block_weight(0.0, 0.1, ssim_only)
    assert block_weight(5.0, 0.1, WeightingConfig(use_ssim=False)) == block_weight(5.0, 0.0)
    assert block_weight(10.0, 0.0, WeightingConfig(w_cap=1.2)) == 1.2
    with pytest.raises(ContractError):
        WeightingConfig(w_cap=2.5)
    with pytest.raises(ContractError):
        WeightingConfig(sigma_w=0.0)
    with pytest.raises(ContractError):
        block_weight(-1.0, 0.0)


dev = st.floats(0.0, 50.0, allow_nan=False)


@settings(max_examples=500, deadline=None)
@given(dp=dev, ds=st.floats(0.0, 1.0), sigma=st.floats(0.1, 10.0), lam=st.floats(0.0, 1000.0))
def test_weight_range(dp, ds, sigma, lam):
    w = block_weight(dp, ds, WeightingConfig(lambda_w=lam, sigma_w=sigma))
    assert 1.0 <= w < 2.0


@settings(max_examples=500, deadline=None)
@given(a=dev, b=dev, ds=st.floats(0.0, 1.0), sigma=st.floats(0.1, 10.0), lam=st.floats(0.0, 1000.0))
def test_weight_monotone(a, b, ds, sigma, lam):
    cfg = WeightingConfig(lambda_w=lam, sigma_w=sigma)
    lo, hi = sorted((a, b))
    assert block_weight(lo, ds, cfg) <= block_weight(hi, ds, cfg)
    lo_s, hi_s = sorted((a / 50.0, b / 50.0))
    assert block_weight(ds * 10, lo_s, cfg) <= block_weight(ds * 10, hi_s, cfg)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(10.0, 40.0), min_size=2, max_size=8), st.floats(-5.0, 5.0))
def test_weights_invariant_to_common_shift(emas, shift):
    base = block_weights([_tr(i, p) for i, p in enumerate(emas)])
    moved = block_weights([_tr(i, p + shift) for i, p in enumerate(emas)])
    for k in base:
        assert moved[k] == pytest.approx(base[k], abs=1e-9)
