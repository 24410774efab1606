import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fragility.errors import NonPositiveValueError, SampleTooSmallError
from fragility.stats import (
    PairedSample,
    SUMMARY_COLUMNS,
    ols,
    ols_loglog,
    pearson,
    pearson_log,
    positive_subset,
    regression_row,
    spearman,
)
from oracles import average_ranks, textbook_pearson


def test_sample_validation():
    with pytest.raises(SampleTooSmallError):
        PairedSample([1.0, 2.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        PairedSample([1.0, 2.0, 3.0], [1.0, 2.0])
    with pytest.raises(NonPositiveValueError):
        pearson_log(PairedSample([1.0, 0.0, 3.0], [1.0, 2.0, 3.0]))
    with pytest.raises(NonPositiveValueError):
        ols_loglog(PairedSample([1.0, 2.0, 3.0], [1.0, -2.0, 3.0]))


def test_pearson_log_power_laws():
    x = np.array([0.5, 1.0, 3.0, 7.0, 20.0])
    assert pearson_log(PairedSample(x, 3.0 * x**1.7)) == pytest.approx(1.0, abs=1e-12)
    assert pearson_log(PairedSample(x, 2.0 / x)) == pytest.approx(-1.0, abs=1e-12)


def test_pearson_log_matches_textbook_formula():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, y = rng.uniform(0.01, 10, 30), rng.uniform(0.01, 10, 30)
        want = textbook_pearson([math.log(v) for v in x], [math.log(v) for v in y])
        assert pearson_log(PairedSample(x, y)) == pytest.approx(want, abs=1e-12)


def test_pearson_degenerate():
    assert math.isnan(pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]))


def test_spearman_examples():
    x = np.array([1.0, 2.0, 5.0, 9.0])
    assert spearman(PairedSample(x, np.exp(x))) == 1.0
    assert spearman(PairedSample(x, -x)) == -1.0


def test_spearman_with_ties_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.integers(0, 5, 15).astype(float)
        y = rng.integers(0, 4, 15).astype(float)
        if len(set(x)) == 1 or len(set(y)) == 1:
            continue
        want = textbook_pearson(average_ranks(x), average_ranks(y))
        assert spearman(PairedSample(x, y)) == pytest.approx(want, abs=1e-12)


def test_ols_loglog_examples():
    x = np.array([0.1, 1.0, 2.0, 30.0])
    assert ols_loglog(PairedSample(x, x)) == pytest.approx((1.0, 1.0))
    assert ols_loglog(PairedSample(x, 5 * x**2)) == pytest.approx((2.0, 1.0))


def test_ols_recovers_noisy_slope():
    slopes = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = np.exp(rng.uniform(-3, 3, 40))
        y = 2.0 * x**0.8 * np.exp(0.3 * rng.standard_normal(40))
        slopes.append(ols_loglog(PairedSample(x, y))[0])
    assert abs(np.median(slopes) - 0.8) <= 0.1


def test_ols_degenerate_inputs():
    s, r2 = ols([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    assert math.isnan(s) and math.isnan(r2)
    assert ols([1.0, 2.0, 3.0], [4.0, 4.0, 4.0]) == (0.0, 1.0)


def test_positive_subset_drops_pairs(caplog):
    with caplog.at_level("INFO", logger="fragility.stats"):
        s = positive_subset([1.0, 0.0, 2.0, 3.0, 5.0], [1.0, 1.0, -1.0, 4.0, 2.0], list("abcde"), "demo")
    assert s.labels == ["a", "d", "e"]
    np.testing.assert_array_equal(s.x, [1.0, 3.0, 5.0])
    assert "excluded 2" in caplog.text
    with pytest.raises(SampleTooSmallError):
        positive_subset([0.0, 0.0, 1.0], [1.0, 1.0, 1.0])


def test_regression_row_columns():
    rng = np.random.default_rng(2)
    x = rng.uniform(1, 5, 10)
    row = regression_row("predictor", PairedSample(x, x**2)).as_row()
    assert list(row) == SUMMARY_COLUMNS
    assert row["slope"] == pytest.approx(2.0) and row["n"] == 10


positive = st.floats(1e-3, 1e3)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(positive, positive), min_size=3, max_size=30, unique_by=(lambda t: t[0], lambda t: t[1])),
    st.floats(1e-3, 1e3),
    st.floats(1e-3, 1e3),
)
def test_rescaling_invariance_and_bounds(pairs, a, b):
    x, y = map(np.array, zip(*pairs))
    s = PairedSample(x, y)
    scaled = PairedSample(a * x, b * y)
    p, r = pearson_log(s), spearman(s)
    assert -1.0 <= p <= 1.0 and -1.0 <= r <= 1.0
    assert pearson_log(scaled) == pytest.approx(p, abs=1e-9)
    assert spearman(scaled) == pytest.approx(r, abs=1e-12)
    _, r2 = ols_loglog(s)
    assert 0.0 <= r2 <= 1.0
