import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from badsim.metrics import (
    DELIVERED,
    FORK_INTEL,
    SUPPRESSED,
    BandwidthLedger,
    annual_fork_broadcast,
    curve_csv,
    measured_overhead,
    overhead,
    overhead_curve,
    overhead_report,
)


def test_annual_broadcast_reference_inputs():
    assert annual_fork_broadcast(141, 0.993201, 32) == pytest.approx(4.481, abs=0.001)
    assert annual_fork_broadcast(141, 0.993201, 8) == pytest.approx(8 * 0.993201 * 141 / 1000)
    assert round(annual_fork_broadcast(141, 0.993201, 8), 4) == 1.1203
    assert annual_fork_broadcast(0, 3, 9) == 0


def test_overhead_reference_point():
    annual = annual_fork_broadcast(141, 0.993201, 32)
    assert overhead(annual, 150) == pytest.approx(0.00249, abs=0.00002)
    assert overhead(4.481, 300) == pytest.approx(overhead(4.481, 150) / 2)
    assert overhead(0, 150) == 0


@pytest.mark.parametrize("m", [0, -1])
def test_nonpositive_bandwidth(m):
    with pytest.raises(ValueError):
        overhead(4.481, m)


def test_negative_inputs_rejected():
    with pytest.raises(ValueError):
        annual_fork_broadcast(-1, 1, 1)


@given(st.floats(0, 1e4), st.floats(0, 10), st.integers(0, 128), st.floats(1, 1e4), st.floats(1.5, 4))
def test_linearity(n, b, d, m, c):
    base = overhead(annual_fork_broadcast(n, b, d), m)
    assert overhead(annual_fork_broadcast(n * c, b, d), m) == pytest.approx(base * c)
    assert overhead(annual_fork_broadcast(n, b, d), m * c) == pytest.approx(base / c)


def test_curve_decreasing_and_halving():
    rows = overhead_curve(4.481, [150, 200, 250, 300])
    fracs = [f for _, f in rows]
    assert all(a > b for a, b in zip(fracs, fracs[1:]))
    assert fracs[0] == pytest.approx(0.00249, abs=0.00002)
    doubled = overhead_curve(4.481, [300, 400, 500, 600])
    assert [f for _, f in doubled] == pytest.approx([f / 2 for f in fracs])


def test_curve_csv():
    text = curve_csv(overhead_curve(4.481, [150, 300]))
    lines = text.splitlines()
    assert lines[0] == "m_gb_month,overhead_fraction"
    assert lines[1].startswith("150,0.00248")


def test_report_json():
    r = overhead_report(4.481, 150)
    doc = json.loads(r.to_json())
    assert doc["overhead_fraction"] == pytest.approx(doc["bad_broadcast_gb_per_year"] / (150 * 12))


def test_ledger_totals():
    led = BandwidthLedger()
    led.record(1, 0, 1, "block", 100, DELIVERED)
    led.record(2, 0, 2, FORK_INTEL, 40, SUPPRESSED)
    led.record(3, 1, 0, "block", 7, DELIVERED)
    assert led.sent_bytes(0) == 140 and led.sent_bytes(0, FORK_INTEL) == 40
    assert led.link_counts()[(0, 2)] == {DELIVERED: 0, SUPPRESSED: 1}
    with pytest.raises(ValueError):
        led.record(4, 0, 1, "block", 1, "lost")


def test_measured_overhead_extremes():
    led = BandwidthLedger()
    led.record(0, 0, 1, "block", 100, DELIVERED)
    led.record(0, 1, 0, FORK_INTEL, 50, DELIVERED)
    assert measured_overhead(led, 0, 10) == 0
    assert measured_overhead(led, 1, 10) == 1
    assert measured_overhead(led, 2, 10) == 0
    led.record(20, 0, 1, FORK_INTEL, 100, DELIVERED)
    assert measured_overhead(led, 0, 10) == 0
    assert measured_overhead(led, 0, 30) == 0.5
    with pytest.raises(ValueError):
        measured_overhead(led, 0, 0)
