import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdpillar.charge import ChargeModelParams, g2_envelope
from qdpillar.correlator import (CoincidenceHistogram, G2Curve, PeakSeries, coincidences,
                                 coincidences_bruteforce, g2_zero, hom_visibility, normalize,
                                 peak_areas, read_g2_csv, rebin, reference_k_min,
                                 write_g2_csv, write_histogram_csv)
from qdpillar.errors import DataError, ValidationError
from qdpillar.montecarlo import DetectionConfig, PulseTrain, simulate_source
from qdpillar.streams import TimestampStream

T_R = 12195
QD1 = ChargeModelParams.from_occupancy(0.85, 20e-6)


def _stream(ch, ts, duration=0.0):
    return TimestampStream(ch, np.asarray(ts, dtype=np.int64), duration=duration)


def _poisson(rng, rate, duration_ps, ch):
    n = rng.poisson(rate * duration_ps * 1e-12)
    return _stream(ch, np.unique(rng.integers(0, duration_ps, n)), duration_ps * 1e-12)


@pytest.fixture(scope="module")
def pulsed():
    pt = PulseTrain(82e6, math.pi, 0.2)
    return simulate_source(QD1, pt, DetectionConfig(0.05), 3).channels


def test_single_pair_example():
    h = coincidences(_stream(0, [0]), _stream(1, [5000]), 1000, 10000)
    assert h.counts.sum() == 1
    assert h.counts[(5000 + 10000) // 1000] == 1
    assert h.edges[15] == 5000  # the edge belongs to the bin on its right


def test_bin_edges_half_open():
    t = 20_000
    h = coincidences(_stream(0, [t]), _stream(1, [t - 10000, t + 9999, t + 10000]), 1000, 10000)
    assert h.counts[0] == 1 and h.counts[-1] == 1 and h.counts.sum() == 2


def test_validation_errors():
    a, b = _stream(0, [0, 10]), _stream(1, [5])
    with pytest.raises(ValidationError):
        coincidences(a, b, 0, 100)
    with pytest.raises(ValidationError):
        coincidences(a, b, 30, 100)
    with pytest.raises(DataError):
        CoincidenceHistogram(10, -100, 100, np.zeros(19), 1, 1, 1.0)
    with pytest.raises(DataError):
        normalize(coincidences(_stream(0, []), b, 10, 100))


def test_unsorted_input_rejected():
    class Raw:  # bypasses the stream's own sort check
        timestamps = np.array([5, 1], dtype=np.int64)
        duration = 1.0
    with pytest.raises(DataError):
        coincidences(Raw(), _stream(1, [0]), 10, 100)


def test_bruteforce_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n0, n1 = rng.integers(0, 300, 2)
        a = _stream(0, np.unique(rng.integers(0, 200_000, n0)))
        b = _stream(1, np.unique(rng.integers(0, 200_000, n1)))
        w = int(rng.integers(1, 500))
        md = w * int(rng.integers(1, 200))
        assert np.array_equal(coincidences(a, b, w, md).counts,
                              coincidences_bruteforce(a, b, w, md))


def test_parallel_matches_serial():
    rng = np.random.default_rng(1)
    a = _poisson(rng, 1e6, 10**10, 0)
    b = _poisson(rng, 1e6, 10**10, 1)
    serial = coincidences(a, b, 1000, 100_000)
    for jobs in (2, 3, 7):
        assert np.array_equal(coincidences(a, b, 1000, 100_000, n_jobs=jobs).counts, serial.counts)


def test_channel_swap_mirrors_exactly():
    # even start / odd stop times with an even bin width keep every delay off the
    # bin edges, so the half-open convention cannot break the mirror image
    rng = np.random.default_rng(2)
    a = _stream(0, 2 * np.unique(rng.integers(0, 50_000, 400)))
    b = _stream(1, 2 * np.unique(rng.integers(0, 50_000, 400)) + 1)
    ab = coincidences(a, b, 100, 5000).counts
    ba = coincidences(_stream(0, b.timestamps), _stream(1, a.timestamps), 100, 5000).counts
    assert np.array_equal(ab, ba[::-1])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 10**6), max_size=200, unique=True),
       st.lists(st.integers(0, 10**6), max_size=200, unique=True),
       st.integers(1, 50), st.integers(1, 50))
def test_bruteforce_property(t0, t1, w, m):
    a, b = _stream(0, sorted(t0)), _stream(1, sorted(t1))
    assert np.array_equal(coincidences(a, b, w, w * m).counts,
                          coincidences_bruteforce(a, b, w, w * m))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 10**9), min_size=1, max_size=300, unique=True),
       st.sampled_from([1, 2, 3, 4, 6, 12]))
def test_rebin_conserves_counts(ts, factor):
    a = _stream(0, sorted(ts))
    h = coincidences(a, a, 1000, 12_000_000 // 12 * 12)
    r = rebin(h, factor)
    assert r.counts.sum() == h.counts.sum()
    assert r.bin_width == factor * h.bin_width and r.n_bins * factor == h.n_bins


def test_rebin_identity_and_errors():
    h = coincidences(_stream(0, [0, 7]), _stream(1, [3]), 1, 10)
    assert np.array_equal(rebin(h, 1).counts, h.counts)
    with pytest.raises(ValidationError):
        rebin(h, 3)
    with pytest.raises(ValidationError):
        rebin(h, 0)


def test_poisson_flat_and_normalized():
    rng = np.random.default_rng(3)
    dur = 2 * 10**12
    a, b = _poisson(rng, 2e5, dur, 0), _poisson(rng, 2e5, dur, 1)
    h = coincidences(a, b, 10_000, 10_000_000)
    assert h.counts.sum() >= 10**6
    expected = len(a) * len(b) * 10_000 / dur
    assert h.counts.mean() == pytest.approx(expected, rel=0.01)
    assert h.counts.var() == pytest.approx(expected, rel=0.15)
    g = normalize(h)
    assert 0.99 <= g.values.mean() <= 1.01
    assert np.all(np.abs(g.values - 1) <= 5 * g.stderr)  # 2000 bins, so 5 sigma
    assert np.mean(np.abs(g.values - 1) <= 3 * g.stderr) > 0.98


def test_pulsed_peaks_at_rep_period(pulsed):
    a, b = pulsed
    h = coincidences(a, b, 100, 40 * T_R // 100 * 100)
    c = h.counts.astype(float)
    # autocorrelate the histogram to find its period
    c = c - c.mean()
    ac = np.correlate(c, c, "full")[c.size - 1:]
    lag = np.argmax(ac[50:200]) + 50
    assert abs(lag * 100 - T_R) <= 100


def test_rebin_to_ten_periods_washes_out_peaks(pulsed):
    a, b = pulsed
    h = rebin(coincidences(a, b, T_R // 5, T_R * 10 * 300), 50)
    assert h.bin_width == 10 * T_R
    g = normalize(h)
    far = np.abs(g.delays) > 20e-6
    x = h.counts[far]
    assert (x.max() - x.min()) / x.mean() < 0.05
    assert g.values[far].mean() == pytest.approx(1.0, abs=0.02)
    mid = g.values.size // 2
    # bins next to zero delay carry the bunching peak 1/<P_h>
    assert g.values[mid + 1] == pytest.approx(1 / 0.85, abs=0.02)
    assert g.values[mid - 2] == pytest.approx(1 / 0.85, abs=0.02)


def test_peak_envelope_follows_analytic():
    pt = PulseTrain(82e6, math.pi, 0.2)
    a, b = simulate_source(QD1, pt, DetectionConfig(0.15), 4).channels
    h = coincidences(a, b, T_R // 5, T_R * 2000)
    ps = peak_areas(h, T_R, T_R)
    ref = ps.area[np.abs(ps.peak_index) >= reference_k_min(T_R, 3e-6)].mean()
    assert ps.at(0) / ref < 0.01
    for k in (5, 40, 100, -40):
        sel = (np.abs(ps.peak_index - k) <= 2)
        measured = ps.area[sel].mean() / ref
        assert measured == pytest.approx(g2_envelope(QD1, abs(k) * T_R * 1e-12), abs=0.03)


def test_peak_areas_flat_and_errors():
    counts = np.full(100, 50)
    h = CoincidenceHistogram(100, -5000, 5000, counts, 10, 10, 1.0)
    ps = peak_areas(h, 1000, 1000)
    assert np.all(ps.area == 500) and ps.peak_index[0] == -4 and ps.peak_index[-1] == 4
    with pytest.raises(ValidationError):
        peak_areas(h, 1000, 1001)
    with pytest.raises(DataError):
        peak_areas(h, 150, 120)


def _series(a0, side, kmax=30):
    k = np.arange(-kmax, kmax + 1)
    area = np.where(k == 0, a0, side).astype(float)
    return PeakSeries(k, area, np.sqrt(area), float(T_R), float(T_R))


def test_g2_zero_examples():
    assert g2_zero(_series(0.0, 100.0))[0] == 0.0
    v, err = g2_zero(_series(20.0, 1000.0), k_min=2)
    assert v == pytest.approx(0.02) and err > 0
    with pytest.raises(DataError):
        g2_zero(_series(0.0, 100.0, kmax=10))  # default reference starts at |k| = 20


def test_reference_k_min():
    assert reference_k_min(T_R) == 20
    assert reference_k_min(T_R, 3e-6) == math.ceil(5 * 3e-6 / (T_R * 1e-12))
    assert reference_k_min(T_R, 1e-12) == 1


def test_hom_examples():
    assert hom_visibility(_series(0.0, 100.0))[0] == 1.0
    assert hom_visibility(_series(50.0, 100.0))[0] == 0.0
    assert hom_visibility(_series(15.0, 1000.0))[0] == 0.97
    # +-1 peaks are not in the reference
    s = _series(15.0, 1000.0)
    area = s.area.copy()
    area[np.abs(s.peak_index) == 1] = 500
    assert hom_visibility(PeakSeries(s.peak_index, area, s.area_err, T_R, T_R))[0] == 0.97


def test_g2_curve_invariants():
    with pytest.raises(DataError):
        G2Curve([0, 0], [1, 1], [0, 0])
    with pytest.raises(DataError):
        G2Curve([0, 1], [1, 1], [0, -1])
    with pytest.raises(DataError):
        G2Curve([0, 1], [1, 1], [0])


def test_csv_round_trip(tmp_path):
    h = coincidences(_stream(0, [0, 1000]), _stream(1, [500, 3000]), 1000, 4000)
    buf = io.StringIO()
    write_histogram_csv(buf, h)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "delay_ps,counts" and len(lines) == 9
    g = normalize(h)
    p = tmp_path / "g2.csv"
    write_g2_csv(p, g)
    back = read_g2_csv(p)
    assert np.array_equal(back.values, g.values) and np.array_equal(back.delays, g.delays)
