from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedelastic import meter
from fedelastic.errors import MeteringError
from fedelastic.meter import CommLedger, TransmittedUpdate

finite = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(1, 60), elements=finite)


def test_threshold_is_boundary_inclusive():
    out = meter.threshold(np.array([0.002, -0.05, 0.0049]), 0.005)
    assert out.tolist() == [0.0, -0.05, 0.0]
    assert meter.threshold(np.array([0.005, -0.005]), 0.005).tolist() == [0.0, 0.0]


def test_threshold_zero_eps_is_identity():
    v = np.array([0.0, 1e-300, -2.0])
    assert np.array_equal(meter.threshold(v, 0.0), v)


def test_threshold_does_not_mutate_input():
    v = np.array([0.001, 1.0])
    meter.threshold(v, 0.01)
    assert v[0] == 0.001


def test_count_nonzero_examples():
    assert meter.count_nonzero(np.zeros(5)) == 0
    assert meter.count_nonzero(np.array([1.0, 0.0, -2.0, 0.0])) == 2


def test_discretize_floor_convention():
    assert meter.discretize([0.0, 0.0099, 0.01, -0.005]).tolist() == [0, 0, 1, -1]


def test_entropy_examples():
    assert meter.empirical_entropy(np.full(10, 0.003)) == 0.0
    assert meter.empirical_entropy(np.array([0.001, 0.002, 0.011, 0.012])) == 1.0
    assert meter.empirical_entropy(0.001 * np.arange(10)) == 0.0
    assert meter.empirical_entropy(0.005 * np.arange(10)) == pytest.approx(math.log2(5), abs=0)
    with pytest.raises(MeteringError):
        meter.empirical_entropy(np.array([]))


def test_record_round_single_update():
    led = meter.record_round(CommLedger(), [TransmittedUpdate(np.array([0.0, 0.02]), 1, 0)])
    assert led.cumulative_nonzero == 1
    assert led.entropy_history == (1.0,)
    assert led.cumulative_bits == 2.0


def test_record_round_empty_round_leaves_ledger():
    led = CommLedger()
    assert meter.record_round(led, []) is led


def test_two_channels_double_elements():
    d = np.array([0.1, 0.0, 0.3])
    one = meter.record_round(CommLedger(), [TransmittedUpdate(d, 1, 0)])
    two = meter.record_round(CommLedger(), [TransmittedUpdate(d, 1, 0),
                                            TransmittedUpdate(d, 1, 0, "control-delta")])
    assert two.cumulative_elements == 2 * one.cumulative_elements
    assert two.cumulative_nonzero == 2 * one.cumulative_nonzero


def test_ledger_ignores_uncounted_channels():
    led = CommLedger(channels=("model-full",))
    led = meter.record_round(led, [TransmittedUpdate(np.ones(3), 1, 0)])
    assert led.rounds == 0


def test_updates_from_several_rounds_rejected():
    with pytest.raises(MeteringError):
        meter.record_round(CommLedger(), [TransmittedUpdate(np.ones(2), 1, 0),
                                          TransmittedUpdate(np.ones(2), 2, 0)])


def test_nonfinite_payload_rejected():
    with pytest.raises(MeteringError):
        TransmittedUpdate(np.array([np.nan]), 1, 0)


def test_per_client_pooling_differs_from_round_pooling():
    ups = [TransmittedUpdate(np.array([0.0, 0.0]), 1, 0), TransmittedUpdate(np.array([0.5, 0.5]), 1, 1)]
    pooled = meter.record_round(CommLedger(), ups)
    per = meter.record_round(CommLedger(pooling="client"), ups)
    assert pooled.cumulative_bits == 4.0
    assert per.cumulative_bits == 0.0


def test_histogram_of_all_zero_updates_is_single_spike():
    led = meter.record_round(CommLedger(), [TransmittedUpdate(np.zeros(7), 1, k) for k in range(3)])
    assert led.histogram == {0: 21}


@settings(max_examples=1000, deadline=None)
@given(vectors, st.floats(0.0, 1.0))
def test_threshold_idempotent(v, eps):
    once = meter.threshold(v, eps)
    assert np.array_equal(meter.threshold(once, eps), once)


@settings(max_examples=1000, deadline=None)
@given(vectors, st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_nnz_nonincreasing_in_eps(v, e1, e2):
    lo, hi = sorted((e1, e2))
    assert meter.count_nonzero(meter.threshold(v, hi)) <= meter.count_nonzero(meter.threshold(v, lo))
    assert meter.count_nonzero(meter.threshold(v, lo)) <= meter.count_nonzero(v)


@settings(max_examples=300, deadline=None)
@given(vectors, st.randoms(use_true_random=False))
def test_entropy_bounds_and_permutation_invariance(v, r):
    h = meter.empirical_entropy(v)
    k = np.unique(meter.discretize(v)).size
    assert 0.0 <= h <= math.log2(k) if k > 1 else h == 0.0
    perm = list(range(v.size))
    r.shuffle(perm)
    assert meter.empirical_entropy(v[perm]) == pytest.approx(h, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(vectors, min_size=1, max_size=6))
def test_ledger_monotone_and_replayable(rounds):
    def replay():
        led = CommLedger()
        hist = []
        for t, v in enumerate(rounds, start=1):
            led = meter.record_round(led, [TransmittedUpdate(v, t, 0)])
            hist.append((led.cumulative_nonzero, led.cumulative_bits, led.cumulative_elements))
        return led, hist

    a, hist = replay()
    b, _ = replay()
    assert a == b
    for prev, cur in zip(hist, hist[1:]):
        assert all(c >= p for p, c in zip(prev, cur))
