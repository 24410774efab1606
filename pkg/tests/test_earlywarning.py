import numpy as np
import pytest

from fragility.earlywarning import (
    SpikeConfig,
    TimeSeries,
    detect_spikes,
    lag_scan,
    lead_lag_report,
    permutation_pvalue,
    precision_at_k,
    zscore,
)
from fragility.errors import ConstantSeriesError

T = 195


def _ar1(n, rng, phi=0.8):
    e = rng.standard_normal(n + 200)
    v = np.zeros_like(e)
    for i in range(1, len(e)):
        v[i] = phi * v[i - 1] + e[i]
    return v[200:]


def _shifted_pair(base, lag, start=30):
    # target[t] = predictor[t - lag]: the predictor leads by ``lag``
    return base[start : start + T], base[start - lag : start - lag + T]


def _sinusoid_pair():
    base = np.sin(2 * np.pi * np.arange(T + 60) / 160)
    return _shifted_pair(base, 16)


def test_config_problems_and_k():
    assert SpikeConfig().problems() == []
    bad = SpikeConfig(horizon=0, n_perm=-1, z_threshold=0, K=0, perm_scheme="shuffle")
    assert len(bad.problems()) == 5
    assert SpikeConfig().k_for(195) == 20
    with pytest.raises(ValueError):
        SpikeConfig(K=300).k_for(195)


def test_time_series_validation():
    assert len(TimeSeries("a", [1, 2, 3])) == 3
    with pytest.raises(ValueError):
        TimeSeries("a", [1.0, np.nan])


def test_zscore_examples():
    np.testing.assert_allclose(zscore([1.0, 2.0, 3.0]), [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-12)
    z = zscore(np.random.default_rng(0).standard_normal(50))
    np.testing.assert_allclose(zscore(z), z, atol=1e-12)
    assert abs(z.mean()) < 1e-12 and abs(z.std() - 1) < 1e-12
    with pytest.raises(ConstantSeriesError):
        zscore([2.0, 2.0, 2.0])


def test_lag_scan_identity():
    x = _ar1(T, np.random.default_rng(1))
    r = lag_scan(x, x)
    assert r.best_lag == 0 and r.best_corr == pytest.approx(1.0)


def test_lag_scan_shifted_sinusoid():
    x, y = _sinusoid_pair()
    r = lag_scan(x, y)
    assert r.best_lag == 16 and r.best_corr >= 0.99


def test_lag_scan_sign_convention():
    x, y = _shifted_pair(_ar1(T + 60, np.random.default_rng(2)), -16)
    assert lag_scan(x, y).best_lag == -16


def test_lag_scan_white_noise_is_weak():
    small = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        small += abs(lag_scan(rng.standard_normal(500), rng.standard_normal(500)).best_corr) < 0.3
    assert small >= 95


def test_lag_scan_length_check():
    with pytest.raises(ValueError):
        lag_scan(np.arange(100.0), np.arange(100.0))
    with pytest.raises(ConstantSeriesError):
        lag_scan(np.ones(T), np.arange(T, dtype=float))


@pytest.mark.parametrize("lag", [-24, -16, 0, 16, 24])
def test_planted_lag_recovery(lag):
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x, y = _shifted_pair(_ar1(T + 60, rng), lag)
        assert lag_scan(x, y).best_lag == lag
        noisy = y / y.std() + rng.standard_normal(T) / 3
        assert abs(lag_scan(x, noisy).best_lag - lag) <= 2


def test_tie_breaks_toward_small_positive_lag():
    # period-2 series correlate perfectly at every lag
    x = np.tile([1.0, -1.0], 100)
    assert lag_scan(x, x, SpikeConfig(max_lag=4)).best_lag == 0
    # period 4: |corr| = 1 at lags +1 and -1, 0 at lag 0
    x = np.tile([1.0, 1.0, -1.0, -1.0], 50)
    for shift in (1, -1):
        r = lag_scan(x, np.roll(x, shift), SpikeConfig(max_lag=2))
        assert r.best_lag == 1 and abs(r.best_corr) == pytest.approx(1.0)


def test_pvalue_floor_on_shifted_sinusoid():
    x, y = _sinusoid_pair()
    assert permutation_pvalue(x, y, SpikeConfig(), rng=0) == pytest.approx(0.001)


def test_pvalue_without_permutations():
    x, y = _sinusoid_pair()
    assert permutation_pvalue(x, y, SpikeConfig(n_perm=0)) == 1.0


def test_pvalue_deterministic_given_rng():
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal(T), rng.standard_normal(T)
    cfg = SpikeConfig(n_perm=99)
    assert permutation_pvalue(x, y, cfg, rng=7) == permutation_pvalue(x, y, cfg, rng=7)
    assert permutation_pvalue(x, y, SpikeConfig(n_perm=99, perm_scheme="circular"), rng=7) >= 0.01


def test_pvalue_calibrated_on_independent_noise():
    cfg = SpikeConfig(n_perm=199)
    rejections = 0
    for s in range(200):
        rng = np.random.default_rng(1000 + s)
        rejections += permutation_pvalue(rng.standard_normal(T), rng.standard_normal(T), cfg, rng=s) <= 0.05
    assert rejections / 200 <= 0.08


def test_pvalue_monotone_in_planted_strength():
    rng = np.random.default_rng(1)
    s = _ar1(T + 16, rng)
    noise = _ar1(T, rng)
    x = s[16:]
    ps = []
    for a in np.arange(1.0, 4.01, 0.25):
        y = a * s[:T] / s.std() + noise / noise.std()
        ps.append(permutation_pvalue(x, y, SpikeConfig(), rng=5))
    assert all(b <= a for a, b in zip(ps, ps[1:]))


def test_lead_lag_report_carries_pvalue():
    x, y = _sinusoid_pair()
    r = lead_lag_report(x, y, SpikeConfig(n_perm=99), rng=1)
    assert r.best_lag == 16 and r.p_value == pytest.approx(0.01)


def _alternating(n=200, sigma=0.1):
    return 1.0 + sigma * np.tile([1.0, -1.0], n // 2)


def test_detect_spikes_constructions():
    assert detect_spikes(np.full(100, 4.0)).size == 0
    base = _alternating()
    assert detect_spikes(base).size == 0
    jumped = base.copy()
    jumped[100] += 10 * 0.1
    np.testing.assert_array_equal(detect_spikes(jumped), [100])
    with pytest.raises(ValueError):
        detect_spikes(np.ones(20))


def _impulses(n, steps):
    v = np.zeros(n)
    v[list(steps)] = 1.0
    return v


def test_precision_at_k_aligned_alarms():
    cfg = SpikeConfig(K=4)
    spikes = [60, 90, 130, 170]
    target = _impulses(T, spikes)
    predictor = np.random.default_rng(0).uniform(0, 0.1, T)
    predictor[[s - cfg.horizon // 2 for s in spikes]] = 5.0
    np.testing.assert_array_equal(detect_spikes(target, cfg), spikes)
    assert precision_at_k(predictor, target, cfg) == 1.0


def test_precision_at_k_exhaustive_alarms():
    cfg = SpikeConfig(K=T)
    spikes = [50, 120]
    target = _impulses(T, spikes)
    predictor = np.random.default_rng(1).standard_normal(T)
    covered = sum(any(t < s <= t + cfg.horizon for s in spikes) for t in range(T))
    assert precision_at_k(predictor, target, cfg) == pytest.approx(covered / T)


def test_precision_at_k_independent_predictor():
    vals = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        target = _impulses(500, sorted(rng.choice(np.arange(30, 500), 3, replace=False)))
        v = precision_at_k(rng.standard_normal(500), target)
        assert 0.0 <= v <= 1.0
        vals.append(v)
    assert np.mean(vals) < 0.5
