import logging

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from fluxvol import diagnostics as dg
from fluxvol.tracer import trace_turns

from conftest import IOTA_HALF, TBAR_HALF

GOLDEN = (np.sqrt(5) - 1) / 2


def cf_digits(x, n):
    out = []
    for _ in range(n):
        if x < 1e-9:
            out.append(10**9)       # rational: treat the tail as infinite
            break
        a = int(np.floor(1 / x))
        out.append(a)
        x = 1 / x - a
    return out


@pytest.fixture(scope="module")
def half_surface(tok):
    turns = trace_turns(tok, 1.5, 0.0, 1000, center=(1.0, 0.0))
    return dg.ReturnSeries.from_turns(turns, field=tok)


def test_golden_rotation():
    est = dg.estimate_iota_closest_returns(dg.ReturnSeries.from_rotation(GOLDEN, 200))
    assert abs(est.iota - 0.6180339887) < 1e-9
    assert est.cf_digits[:8] == [1] * 8


def test_rational_rotation_detected():
    with pytest.raises(dg.RationalWindingError) as e:
        dg.estimate_iota_closest_returns(dg.ReturnSeries.from_rotation(0.25, 50))
    assert e.value.period == 4


def test_insufficient_data():
    with pytest.raises(dg.InsufficientDataError):
        dg.estimate_iota_closest_returns(dg.ReturnSeries.from_rotation(GOLDEN, 2))


def test_recurrence_holds():
    est = dg.estimate_iota_closest_returns(dg.ReturnSeries.from_rotation(np.sqrt(2) - 1, 3000))
    n = [1] + est.closest_return_indices[1:]
    n_prev = [0] + n[:-1]
    for k in range(1, len(n) - 1):
        assert n[k + 1] == est.recurrence_digits[k] * n[k] + n_prev[k]


def test_convergent_errors_decrease():
    est = dg.estimate_iota_closest_returns(dg.ReturnSeries.from_rotation(np.pi - 3, 5000))
    errs = np.abs(np.array(est.estimates) - (np.pi - 3))
    assert np.all(np.diff(errs[errs > 1e-14]) < 0)


def test_tokamak_iota(half_surface):
    est = dg.estimate_iota_closest_returns(half_surface.head(500))
    assert abs(est.iota - IOTA_HALF) < 1e-6
    assert est.alternating
    assert est.cf_digits[:3] == [1, 6, 2]


def test_constant_times_exact():
    s = dg.ReturnSeries.from_rotation(GOLDEN, 300, T=lambda th: np.full_like(th, 2.5))
    T, err = dg.mean_return_time_trapezoid(s, GOLDEN)
    assert T == 2.5 or abs(T - 2.5) < 1e-15
    assert err < 1e-15


def test_cosine_times():
    s = dg.ReturnSeries.from_rotation(GOLDEN, 1000, T=lambda th: 1 + 0.3 * np.cos(2 * np.pi * th))
    T, _ = dg.mean_return_time_trapezoid(s, GOLDEN)
    assert abs(T - 1.0) < 1e-4


def test_degenerate_spacing():
    s = dg.ReturnSeries.from_rotation(GOLDEN, 50)
    with pytest.raises(dg.DegenerateSpacingError):
        dg.mean_return_time_trapezoid(s, 0.5)


def test_tokamak_mean_return_time(half_surface):
    est = dg.estimate_iota_closest_returns(half_surface)
    T, err = dg.mean_return_time_trapezoid(half_surface, est.iota)
    assert abs(T - TBAR_HALF) < 1e-5
    # error proxy sanity: half-sample difference within 10x of the estimate
    T_half, _ = dg.mean_return_time_trapezoid(half_surface.head(500), est.iota)
    assert abs(T - T_half) <= 10 * err + 1e-15
    # relabelling the start point
    T2, err2 = dg.mean_return_time_trapezoid(half_surface.tail(37), est.iota)
    assert abs(T2 - T) <= max(err, err2)


def test_birkhoff(half_surface):
    assert dg.weighted_birkhoff_average(np.full(100, 3.0)) == pytest.approx(3.0, abs=1e-15)
    alt = np.array([1.0, -1.0] * 50)
    assert dg.weighted_birkhoff_average(alt, window_exponent=0) == 0.0
    wba = dg.weighted_birkhoff_average(half_surface.Ts[:500])
    est = dg.estimate_iota_closest_returns(half_surface.head(500))
    T, _ = dg.mean_return_time_trapezoid(half_surface.head(500), est.iota)
    assert abs(wba - T) < 1e-5
    with pytest.raises(ValueError):
        dg.weighted_birkhoff_average([])


def test_non_alternating_is_logged(caplog):
    s = dg.ReturnSeries.from_rotation(GOLDEN, 200)
    phis = s.phis.copy()
    est = dg.estimate_iota_closest_returns(s)
    n2 = est.closest_return_indices[2]
    # flip one record to the other side of the start
    phis[n2] = np.mod(-phis[n2], 1.0)
    with caplog.at_level(logging.WARNING):
        out = dg.estimate_iota_closest_returns(dg.ReturnSeries(phis, s.Ts))
    assert not out.alternating
    assert "alternate" in caplog.text


def test_series_validation():
    with pytest.raises(ValueError):
        dg.ReturnSeries([0.1, 1.2], [1, 1])
    with pytest.raises(ValueError):
        dg.ReturnSeries([0.1, 0.2], [1, -1])


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 0.99))
def test_rotation_number_property(x):
    digits = cf_digits(x, 12)
    assume(len(digits) == 12 and max(digits[:8]) < 40)        # keep the needed orbit length small
    s = dg.ReturnSeries.from_rotation(x, 4000)
    est = dg.estimate_iota_closest_returns(s)
    assert abs(est.iota - x) < 1e-6
    assert est.cf_digits[:3] == digits[:3]


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 100))
def test_trapezoid_shift_invariance(a, k):
    T = lambda th: 2 + 0.5 * np.sin(2 * np.pi * (th + a))
    s = dg.ReturnSeries.from_rotation(GOLDEN, 800, T=T)
    full, err = dg.mean_return_time_trapezoid(s, GOLDEN)
    shifted, err2 = dg.mean_return_time_trapezoid(s.tail(k), GOLDEN)
    assert abs(full - 2) < 1e-4
    assert abs(shifted - full) <= 10 * max(err, err2) + 1e-12


def test_digits_extended_by_estimate():
    # 200 returns of sqrt(2)-1 only reach the 169 record (6 digits); the
    # exact estimate pins down the rest
    est = dg.estimate_iota_closest_returns(dg.ReturnSeries.from_rotation(np.sqrt(2) - 1, 200))
    assert len(est.recurrence_digits) == 6
    assert est.cf_digits[:12] == [2] * 12
    est = dg.estimate_iota_closest_returns(dg.ReturnSeries.from_rotation(np.pi - 3, 200))
    assert est.cf_digits[:8] == [7, 15, 1, 292, 1, 1, 1, 2]


def test_digits_limited_by_error():
    # a noisy estimate must not claim digits beyond its error bound
    d = dg._resolved_digits(np.sqrt(2) - 1, 1e-4)
    assert 3 <= len(d) <= 6 and d == [2] * len(d)
