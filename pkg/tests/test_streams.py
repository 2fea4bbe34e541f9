import numpy as np
from scipy import stats

from qudit_readout.streams import CounterStreams


def test_pure_function_of_seed_trial_counter():
    a = CounterStreams(42)
    b = CounterStreams(42)
    ka, kb = a.keys(np.arange(100)), b.keys(np.arange(100))
    assert np.array_equal(a.uniform(ka, 7), b.uniform(kb, 7))
    # a single trial reproduces its slice of a batch
    assert a.uniform(a.keys(np.array([57])), 7)[0] == a.uniform(ka, 7)[57]


def test_counter_and_seed_change_stream():
    s = CounterStreams(1)
    k = s.keys(np.arange(1000))
    assert not np.array_equal(s.uniform(k, 0), s.uniform(k, 1))
    other = CounterStreams(2)
    assert not np.array_equal(s.uniform(k, 0), other.uniform(other.keys(np.arange(1000)), 0))


def test_per_element_counters():
    s = CounterStreams(9)
    k = s.keys(np.arange(5))
    c = np.array([3, 1, 4, 1, 5])
    got = s.uniform(k, c)
    want = [s.uniform(k[i:i + 1], int(c[i]))[0] for i in range(5)]
    assert np.array_equal(got, want)


def test_uniformity_and_independence():
    s = CounterStreams(2024)
    k = s.keys(np.arange(200_000))
    u0, u1 = s.uniform(k, 0), s.uniform(k, 1)
    assert u0.min() >= 0 and u0.max() < 1
    assert stats.kstest(u0, "uniform").pvalue > 1e-3
    assert abs(np.corrcoef(u0, u1)[0, 1]) < 0.01
    assert abs(np.corrcoef(u0[:-1], u0[1:])[0, 1]) < 0.01


def test_large_seed_masked():
    assert CounterStreams(2**64 + 5).seed == 5
