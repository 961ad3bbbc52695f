"""Single-orbit estimators: rotation number, mean return time, Birkhoff averages.

A field line on an irrational torus returns to a transverse closed curve
``gamma`` at coordinates ``phi_n`` (in revolutions, ``phi_0 = 0`` at the
start) after return times ``T_n``.

* The rotation number ``iota`` is recovered from the successively closest
  returns to the start, ``n_0 = 1 < n_1 < n_2 < ...``.  With the signed
  offsets ``s_n = phi_n - round(phi_n)`` and revolution counts ``m_n`` the
  linearisation ``s_n ~ c (n iota - m_n)`` near the start gives::

      iota ~ (m_k s_{n_{k-1}} - m_{k-1} s_{n_k}) / (n_k s_{n_{k-1}} - n_{k-1} s_{n_k})

  The indices obey ``n_{k+1} = a_k n_k + n_{k-1}`` (``n_{-1} = 0``) and
  the ``a_k`` are the continued-fraction digits of the distance of
  ``iota`` to the nearest integer.
* In the straightening parameter of the return map the n-th return sits
  at ``theta = (n-1) iota mod 1``; sorting the return times by that label
  and applying the periodic trapezoidal rule estimates their mean.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field
from fractions import Fraction

import numpy as np

log = logging.getLogger(__name__)

PERIOD_TOL = 1e-12


class InsufficientDataError(ValueError):
    pass


class RationalWindingError(ValueError):
    def __init__(self, period, msg=None):
        self.period = int(period)
        super().__init__(msg or f"return series is periodic with period {self.period}")


class DegenerateSpacingError(ValueError):
    pass


@dataclass
class ReturnSeries:
    """Coordinates ``phis[k]`` of the k-th visit to ``gamma`` (k = 0 is the
    start) and ``Ts[k]``, the time from visit k to visit k + 1.

    ``lifts`` optionally carries the unwrapped coordinate (real number of
    revolutions); with it the integer part of ``iota`` is recovered too.
    """

    phis: np.ndarray
    Ts: np.ndarray
    lifts: np.ndarray | None = None

    def __post_init__(self):
        self.phis = np.asarray(self.phis, dtype=float)
        self.Ts = np.asarray(self.Ts, dtype=float)
        if self.phis.shape != self.Ts.shape:
            raise ValueError("phis and Ts must have equal length")
        if np.any(self.phis < 0) or np.any(self.phis >= 1):
            raise ValueError("phis must lie in [0, 1)")
        if np.any(self.Ts <= 0):
            raise ValueError("return times must be positive")
        if self.lifts is not None:
            self.lifts = np.asarray(self.lifts, dtype=float)
            if self.lifts.shape != self.phis.shape:
                raise ValueError("lifts must match phis")

    @property
    def n_count(self):
        return len(self.phis)

    def head(self, n):
        return ReturnSeries(self.phis[:n], self.Ts[:n],
                            None if self.lifts is None else self.lifts[:n])

    def tail(self, start):
        """The same orbit relabelled so that visit ``start`` is the origin."""
        lifts = None if self.lifts is None else self.lifts[start:] - self.lifts[start]
        return ReturnSeries(np.mod(self.phis[start:] - self.phis[start], 1.0),
                            self.Ts[start:], lifts)

    @classmethod
    def from_rotation(cls, iota, n, T=None):
        """Rigid rotation ``phi_n = frac(n iota)`` with times ``T(theta)``."""
        k = np.arange(n)
        lifts = k * iota
        phis = np.mod(lifts, 1.0)
        Ts = np.ones(n) if T is None else np.asarray(T(phis), dtype=float)
        return cls(phis, Ts, None)

    @classmethod
    def from_turns(cls, turns, orientation=None, field=None):
        """Poloidal-angle series of a traced line (``tracer.trace_turns``
        run with a ``center``).

        ``orientation`` is +1/-1 for the sense of the angle; by default it
        follows the field's poloidal sense at the start so that ``iota``
        comes out positive.
        """
        if turns.theta is None:
            raise ValueError("turn series was traced without a center")
        th = turns.theta[:-1] / (2 * np.pi)
        lift = th - th[0]
        if orientation is None:
            step = turns.theta[1] - turns.theta[0]
            orientation = 1.0 if step >= 0 else -1.0
            if field is not None:
                Rc, Zc = turns.center
                BR, _, BZ = field.B_cyl_point(turns.R[0], turns.phi0, turns.Z[0])
                orientation = 1.0 if (turns.R[0] - Rc) * BZ - (turns.Z[0] - Zc) * BR >= 0 else -1.0
        lift = orientation * lift
        phis = np.mod(lift, 1.0)
        phis = np.where(phis >= 1.0, 0.0, phis)
        return cls(phis, turns.return_times, lift)


@dataclass
class IotaEstimate:
    iota: float
    closest_return_indices: list
    revolution_counts: list
    recurrence_digits: list
    cf_digits: list
    error_estimate: float
    estimates: list = dc_field(default_factory=list)
    alternating: bool = True


def _circle_period(rel):
    order = np.argsort(rel, kind="stable")
    srt = rel[order]
    gaps = np.diff(np.append(srt, srt[0] + 1.0))
    close = np.nonzero(gaps < PERIOD_TOL)[0]
    if close.size == 0:
        return None
    n = len(rel)
    return int(min(abs(int(order[(i + 1) % n]) - int(order[i])) for i in close))


def _fraction_digits(x_digits, frac):
    """CF digits of ``frac`` given the digits of its distance to 0 or 1."""
    if frac <= 0.5:
        return list(x_digits)
    head = [1]
    if x_digits[0] > 1:
        head.append(x_digits[0] - 1)
        return head + list(x_digits[1:])
    return head + list(x_digits[1:])


def _cf_expand(x: Fraction, n):
    out = []
    for _ in range(n):
        if x == 0:
            break
        x = 1 / x
        a = x.numerator // x.denominator
        out.append(int(a))
        x -= a
    return out


def _resolved_digits(frac, err, n_max=40):
    """CF digits shared by every number within ``err`` of ``frac``: the
    common prefix of the expansions of the two ends of the interval (the
    last shared digit is dropped when an end terminates there)."""
    e = max(float(err), 8 * np.finfo(float).eps)
    lo, hi = Fraction(max(frac - e, 0.0)), Fraction(min(frac + e, 1.0))
    a, b = _cf_expand(lo, n_max + 1), _cf_expand(hi, n_max + 1)
    k = 0
    while k < min(len(a), len(b)) and a[k] == b[k]:
        k += 1
    if k and (k == len(a) or k == len(b)):
        k -= 1
    return a[:min(k, n_max)]


def estimate_iota_closest_returns(series: ReturnSeries) -> IotaEstimate:
    """Rotation number from the successively closest returns to the start."""
    N = series.n_count
    if N < 3:
        raise InsufficientDataError("need at least 3 points on the return curve")
    rel = np.mod(series.phis - series.phis[0], 1.0)
    period = _circle_period(rel)
    if period is not None:
        raise RationalWindingError(period)
    s = rel - np.round(rel)

    records = [1]
    best = abs(s[1])
    for n in range(2, N):
        if abs(s[n]) < best:
            best = abs(s[n])
            records.append(n)
    if len(records) < 2:
        raise InsufficientDataError("fewer than two closest-return levels")

    lifted = series.lifts is not None
    if lifted:
        L = series.lifts - series.lifts[0]
        s = L - np.round(L)
        m = [int(np.round(L[n])) for n in records]
        running = L[1]
    else:
        running = s[1]
        m = [0]

    estimates = []
    for k in range(1, len(records)):
        nk, nj = records[k], records[k - 1]
        if not lifted:
            m.append(int(np.round(nk * running - s[nk])))
        num = m[k] * s[nj] - m[k - 1] * s[nk]
        den = nk * s[nj] - nj * s[nk]
        running = num / den
        estimates.append(running)

    signs = np.sign(s[records])
    alternating = bool(np.all(signs[1:] * signs[:-1] < 0))
    if not alternating:
        log.warning("closest returns do not alternate sides of the start point")

    digits = [records[1]]
    for k in range(1, len(records) - 1):
        q, r = divmod(records[k + 1] - records[k - 1], records[k])
        if r:
            log.warning("closest-return recurrence not exact at level %d", k)
            q = int(round((records[k + 1] - records[k - 1]) / records[k]))
        digits.append(int(q))

    iota = estimates[-1]
    if not lifted:
        iota = float(np.mod(iota, 1.0))
    err = abs(estimates[-1] - estimates[-2]) if len(estimates) > 1 else abs(estimates[-1] - s[1])
    frac = iota - np.floor(iota)
    # digits seen in the return indices, extended by those the estimate
    # pins down within its error bound
    cf = _fraction_digits(digits, frac)
    resolved = _resolved_digits(frac, err)
    if len(resolved) > len(cf):
        if resolved[:len(cf) - 1] == cf[:-1]:
            cf = resolved
        else:
            log.warning("continued-fraction digits from the estimate disagree with the "
                        "closest-return indices")
    return IotaEstimate(float(iota), records, m, digits, cf,
                        float(err), [float(e) for e in estimates], alternating)


def _trapezoid_mean(theta, T):
    order = np.argsort(theta, kind="stable")
    th, Ts = theta[order], T[order]
    if np.any(np.diff(th) < PERIOD_TOL) or (th[0] + 1.0 - th[-1]) < PERIOD_TOL:
        raise DegenerateSpacingError("coincident return labels (rational winding?)")
    th1 = np.append(th, th[0] + 1.0)
    T1 = np.append(Ts, Ts[0])
    return float(np.sum(0.5 * (T1[1:] + T1[:-1]) * np.diff(th1)))


def mean_return_time_trapezoid(series: ReturnSeries, iota: float):
    """Mean return time by the periodic trapezoidal rule on ``frac(k iota)``.

    Returns ``(mean, error_estimate)``; the error estimate is the change
    from using only the first half of the returns.
    """
    N = series.n_count
    if N < 3:
        raise InsufficientDataError("need at least 3 return times")
    theta = np.mod(np.arange(N) * iota, 1.0)
    full = _trapezoid_mean(theta, series.Ts)
    half = _trapezoid_mean(theta[: N // 2], series.Ts[: N // 2]) if N >= 6 else full
    return full, abs(full - half)


def weighted_birkhoff_average(values, window_exponent=1.0):
    """Weighted mean with the bump ``w(s) = exp(-(s (1 - s))**-p)``.

    ``s = n / (N + 1)``; ``p = window_exponent``.  ``p = 0`` gives the flat
    window (plain arithmetic mean).
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("empty sequence")
    if window_exponent == 0:
        return float(np.mean(v))
    s = np.arange(1, v.size + 1) / (v.size + 1)
    w = np.exp(-np.power(s * (1.0 - s), -float(window_exponent)))
    return float(np.sum(w * v) / np.sum(w))


@dataclass
class SurfaceDiagnostics:
    iota: IotaEstimate
    T_bar: float
    T_bar_error: float
    T_birkhoff: float
    series: ReturnSeries = dc_field(repr=False)


def diagnose_turns(turns, field=None) -> SurfaceDiagnostics:
    """Rotation number and mean return time from a traced turn series."""
    series = ReturnSeries.from_turns(turns, field=field)
    est = estimate_iota_closest_returns(series)
    T_bar, err = mean_return_time_trapezoid(series, est.iota)
    return SurfaceDiagnostics(est, T_bar, err, weighted_birkhoff_average(series.Ts), series)
