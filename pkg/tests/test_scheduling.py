import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asyncfl.errors import ConfigError
from asyncfl.scheduling import (LRSchedule, StalenessWeighting, delay_aware_rate, effective_rate,
                                lemma1_step_cap, lemma3_average_bound, staleness_weight)


def test_delay_aware_examples():
    assert delay_aware_rate(1e-3, 0, 0, 0.01) == 1e-3
    assert delay_aware_rate(1e-3, 3, 0, 0.01) == pytest.approx(5e-4)
    assert delay_aware_rate(1e-3, 0, 100, 0.01) == pytest.approx(5e-4)
    with pytest.raises(ConfigError):
        delay_aware_rate(0.0, 0, 0, 0.01)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 1000), st.floats(0, 100), st.floats(0.001, 1))
def test_delay_aware_monotone(t, d, alpha):
    r = delay_aware_rate(0.1, t, d, alpha)
    assert r > 0
    assert delay_aware_rate(0.1, t + 1, d, alpha) <= r
    assert delay_aware_rate(0.1, t, d + 1, alpha) < r


def test_step_cap_examples():
    assert lemma1_step_cap(1, 2, 5, 2) == pytest.approx(1 / 120)
    assert lemma1_step_cap(2, 3, 4, 0) == pytest.approx(1 / (6 * 2 * 3 * 4))
    assert lemma1_step_cap(1, 2, 10, 2) == pytest.approx(0.5 * lemma1_step_cap(1, 2, 5, 2))


def test_effective_rate():
    assert effective_rate(1e-3, 5, 10) == pytest.approx(0.05)
    assert effective_rate(0.3, 1, 1) == 0.3


def test_staleness_weights():
    pen = StalenessWeighting("penalized", 0.5)
    assert staleness_weight(pen, 0) == 1.0
    assert staleness_weight(pen, 2) == 0.5
    assert staleness_weight(StalenessWeighting("uniform"), 7) == 1.0
    w = [pen.weight(t) for t in range(20)]
    assert all(a >= b for a, b in zip(w, w[1:])) and all(0 < x <= 1 for x in w)
    with pytest.raises(ConfigError):
        staleness_weight(pen, -1)


def test_delay_average_bound_examples():
    assert lemma3_average_bound(1, 1, 0, 0, 1, 0.0, [0] * 100, 99) == pytest.approx(0.1)
    base = lemma3_average_bound(1, 1, 0, 0, 1, 0.5, [0] * 100, 99)
    assert base == pytest.approx(1 / math.sqrt(100))
    T = 99
    q = lemma3_average_bound(1, 1, 0, 0, 1, 0.0, [], 4 * T + 3)
    assert q == pytest.approx(0.5 * lemma3_average_bound(1, 1, 0, 0, 1, 0.0, [], T))
    assert math.isfinite(lemma3_average_bound(1, 0.1, 1, 1, 1, 0.0, [], 0))


def test_delay_average_bound_nonincreasing_for_large_t():
    for a1 in (0.0, 0.5, 2.0):
        for a2 in (0.0, 1.0):
            vals = [lemma3_average_bound(2.0, 1 / 6, a1, a2, 0.1, 0.0, [], T) for T in range(8, 400)]
            assert all(x >= y - 1e-15 for x, y in zip(vals, vals[1:]))


def test_schedule_rates():
    assert LRSchedule("constant", gamma=0.2).rate(5) == 0.2
    assert LRSchedule("lemma_capped", safety=0.9).rate(3, cap=0.01) == pytest.approx(0.009)
    with pytest.raises(ConfigError):
        LRSchedule("lemma_capped").rate(0)
    with pytest.raises(ConfigError):
        LRSchedule("constant", gamma=0.0)
    assert LRSchedule("delay_aware", gamma0=1e-3, delay_alpha=0.01).rate(3, 0.0) == pytest.approx(5e-4)
