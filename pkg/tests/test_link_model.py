import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from linkweave.link_model import (
    INITIAL_BANDWIDTH,
    INITIAL_LATENCY_US,
    LinkCharacteristic,
    LinkState,
    LinkStatus,
)


def make(latency_ms=100, bw=100_000, in_flight=0.0):
    return LinkState(0, LinkCharacteristic(latency_ms * 1000, bw), in_flight=in_flight)


def test_priors():
    link = LinkState(3)
    assert link.char.latency_us == INITIAL_LATENCY_US == 100_000
    assert link.char.bandwidth == INITIAL_BANDWIDTH == 125_000


def test_characteristic_shape():
    char = LinkCharacteristic(400_000, 87_500)
    assert char.size(0) == 0
    assert char.size(399_999) == 0
    assert char.size(400_000) == 0
    assert char.size(1_400_000) == pytest.approx(87_500)


class TestDecay:
    def test_partial(self):
        link = make(bw=100_000, in_flight=50_000)
        assert link.decay(200_000) == pytest.approx(30_000)
        assert link.last_decay_at == 200_000

    def test_clamps_at_zero(self):
        link = make(bw=100_000, in_flight=1000)
        assert link.decay(1_000_000) == 0

    def test_zero_elapsed_is_identity(self):
        link = make(in_flight=1234.5)
        assert link.decay(0) == 1234.5

    def test_backward_clock_rejected(self):
        link = make()
        link.decay(10)
        with pytest.raises(ValueError):
            link.decay(5)

    @given(st.floats(0, 1e7), st.integers(0, 10**7), st.integers(0, 10**7), st.floats(1e3, 1e7))
    def test_composes_additively(self, e, a, b, bw):
        one, two = make(bw=bw, in_flight=e), make(bw=bw, in_flight=e)
        one.decay(a)
        one.decay(a + b)
        two.decay(a + b)
        assert one.in_flight == pytest.approx(two.in_flight, abs=1e-6)


class TestRecordSent:
    def test_from_zero(self):
        link = make()
        link.record_sent(1400, 0)
        assert link.in_flight == 1400

    def test_after_decay(self):
        link = make(bw=100_000, in_flight=50_000)
        link.record_sent(10_000, 200_000)
        assert link.in_flight == pytest.approx(40_000)

    def test_additive(self):
        link = make()
        link.record_sent(700, 5)
        link.record_sent(700, 5)
        assert link.in_flight == 1400

    def test_zero_size_rejected(self):
        with pytest.raises(ValueError):
            make().record_sent(0, 0)

    @given(st.lists(st.tuples(st.integers(0, 100_000), st.integers(1, 1200)), max_size=50))
    def test_never_negative(self, steps):
        link = make(bw=50_000)
        now = 0
        for dt, size in steps:
            now += dt
            link.record_sent(size, now)
            assert link.in_flight >= 0
            link.decay(now + dt)
            now += dt
            assert link.in_flight >= 0


class TestEstimatedDelivery:
    def test_idle_link(self):
        link = LinkState(0, LinkCharacteristic(400_000, 87_500))
        assert link.estimated_delivery(1400) == pytest.approx(416_000)

    def test_zero_size_is_latency(self):
        assert make(latency_ms=250).estimated_delivery(0) == 250_000

    def test_with_in_flight(self):
        assert make(latency_ms=100, bw=100_000, in_flight=20_000).estimated_delivery(10_000) == pytest.approx(400_000)

    def test_failed_link_unschedulable(self):
        link = make()
        link.status = LinkStatus.FAILED
        assert link.estimated_delivery(1) == math.inf

    @given(st.floats(0, 1e6), st.floats(0, 1e6), st.floats(0, 1e6), st.floats(1e3, 1e7))
    def test_monotone(self, size, extra, e, bw):
        link = make(bw=bw, in_flight=e)
        assert link.estimated_delivery(size + extra) >= link.estimated_delivery(size)
        assert link.estimated_delivery(size, e + extra) >= link.estimated_delivery(size, e)

    @given(st.integers(0, 10**6), st.floats(0, 1e6), st.integers(1, 10**6), st.floats(1e3, 1e7))
    def test_inverse_of_characteristic(self, size, e, latency, bw):
        link = LinkState(0, LinkCharacteristic(latency, bw), in_flight=e)
        t = link.estimated_delivery(size)
        assert link.char.size(t) == pytest.approx(size + e, rel=1e-9, abs=1e-6)


class TestBandwidthEstimate:
    def test_degenerate_weight(self):
        link = make(bw=10_000)
        link.update_bandwidth(175_000, 2_000_000, True, alpha=1.0)
        assert link.char.bandwidth == pytest.approx(87_500)

    def test_ewma(self):
        link = make(bw=80_000)
        link.update_bandwidth(120_000, 1_000_000, True)
        assert link.char.bandwidth == pytest.approx(90_000)

    @given(st.floats(0, 1e9), st.integers(1, 10**8))
    def test_untouched_unless_buffers_full(self, drained, interval):
        link = make(bw=80_000)
        before = link.char
        assert link.update_bandwidth(drained, interval, False) is False
        assert link.char is before

    def test_interval_must_be_positive(self):
        with pytest.raises(ValueError):
            make().update_bandwidth(1, 0, True)

    def test_change_flag(self):
        link = make(bw=100_000)
        assert link.update_bandwidth(100_000, 1_000_000, True) is False
        assert link.update_bandwidth(1_000_000, 1_000_000, True) is True


class TestLatencyEstimate:
    def test_first_sample(self):
        link = LinkState(0)
        link.update_latency(200_000)
        assert link.srtt_us == 200_000
        assert link.char.latency_us == 100_000

    def test_ewma(self):
        link = LinkState(0)
        link.update_latency(200_000)
        link.update_latency(280_000)
        assert link.srtt_us == pytest.approx(210_000)

    def test_fixed_point(self):
        link = LinkState(0)
        link.update_latency(150_000)
        link.update_latency(150_000)
        assert link.srtt_us == 150_000

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            LinkState(0).update_latency(0)


def test_suspect_doubles_latency_with_cap():
    link = make(latency_ms=100)
    link.suspect()
    assert link.char.latency_us == 200_000
    assert link.consecutive_timeouts == 1
    for _ in range(20):
        link.suspect()
    assert link.char.latency_us == 60_000_000


def test_reconnect_resets_in_flight_and_halves_bandwidth():
    link = make(bw=100_000, in_flight=5000)
    link.status = LinkStatus.FAILED
    link.reset_after_reconnect(10)
    assert link.in_flight == 0
    assert link.char.bandwidth == 50_000
    assert link.status is LinkStatus.READY
