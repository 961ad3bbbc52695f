"""Field-line tracing, section crossings, return maps and the magnetic axis.

Field lines solve ``dx/dt = B(x)``.  Time-parametrised traces use an
adaptive 8th-order Dormand-Prince scheme with dense output; crossings of a
section are refined by Brent's method on the dense interpolant.  For
toroidal planes ``phi = phi0`` crossed with ``B_phi > 0`` there is also a
vectorised route that integrates in ``phi`` and gets the first-return time
as an extra state variable, which is what the bulk volume methods use.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np
from scipy.integrate import ode, solve_ivp
from scipy.optimize import brentq

from .field import DomainError, FieldModel, TWO_PI, cart_to_cyl, cyl_to_cart

log = logging.getLogger(__name__)

CROSSING_TOL = 1e-10
TRANSVERSE_TOL = 1e-6


@dataclass
class CrossingEvent:
    t: float
    point: np.ndarray
    direction: int
    transverse: bool = True


@dataclass
class SectionSpec:
    """Zero set of ``func`` restricted to where ``accept`` holds.

    ``grad`` is the gradient of ``func`` (used for direction and the
    transversality test).
    """

    func: Callable
    grad: Callable
    accept: Callable = lambda x: True
    name: str = "section"


def plane_section(phi0=0.0) -> SectionSpec:
    """The half plane ``phi = phi0`` (positive direction = increasing phi)."""
    c, s = np.cos(phi0), np.sin(phi0)
    n = np.array([-s, c, 0.0])
    return SectionSpec(func=lambda x: float(n @ x), grad=lambda x: n,
                       accept=lambda x: c * x[0] + s * x[1] > 0,
                       name=f"plane phi={phi0:g}")


@dataclass
class OrbitSegment:
    times: np.ndarray
    points: np.ndarray
    status: str = "ok"
    crossings: list = dc_field(default_factory=list)
    sols: list = dc_field(default_factory=list, repr=False)

    def __call__(self, t):
        """Dense-output position at time ``t``."""
        for t0, t1, sol in self.sols:
            lo, hi = min(t0, t1), max(t0, t1)
            if lo <= t <= hi:
                return sol(t)
        raise ValueError(f"t={t} outside traced interval")

    @property
    def end(self):
        return self.points[-1]


def _rhs(field):
    def f(t, x):
        return field.B_point(x)
    return f


def _domain_event(field):
    def ev(t, x):
        return field.domain_margin(x)
    ev.terminal = True
    ev.direction = -1
    return ev


def trace(field: FieldModel, start, t_end, rtol=1e-10, atol=1e-12, max_step=np.inf,
          t0=0.0) -> OrbitSegment:
    """Integrate the field line through ``start`` from ``t0`` to ``t_end``.

    ``t_end < t0`` integrates backwards.  Leaving the field domain stops
    the integration with ``status='left-domain'``.
    """
    start = np.asarray(start, dtype=float)
    if not field.in_domain(start):
        raise DomainError("start point outside field domain")
    if t_end == t0:
        raise ValueError("empty time span")
    res = solve_ivp(_rhs(field), (t0, t_end), start, method="DOP853", rtol=rtol, atol=atol,
                    dense_output=True, events=[_domain_event(field)], max_step=max_step)
    if res.status == -1:
        status = "failed"
        log.warning("integrator failure: %s", res.message)
    elif res.status == 1:
        status = "left-domain"
    else:
        status = "ok"
    return OrbitSegment(times=res.t, points=res.y.T.copy(), status=status,
                        sols=[(res.t[0], res.t[-1], res.sol)])


def _refine(orbit, section, ta, tb):
    g = lambda t: section.func(orbit(t))
    ga, gb = g(ta), g(tb)
    if ga == 0.0:
        return ta
    if gb == 0.0:
        return tb
    t = brentq(g, ta, tb, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    return t


def find_crossings(orbit: OrbitSegment, section: SectionSpec, max_count=None, field=None,
                   include_start=False):
    """Crossings of ``section`` along ``orbit`` in increasing time.

    Sign changes of the section function between stored steps are refined
    on the dense output.  When ``field`` is given, crossings with
    ``|dg/dt| < 1e-6 |B| |grad g|`` are flagged non-transverse.
    ``include_start`` records ``t = times[0]`` if the start lies on the
    section.
    """
    g = np.array([section.func(p) for p in orbit.points])
    events = []
    if include_start and abs(g[0]) < CROSSING_TOL and section.accept(orbit.points[0]):
        events.append(_make_event(orbit.times[0], orbit.points[0], section, field))
    idx = np.nonzero(np.sign(g[:-1]) * np.sign(g[1:]) < 0)[0]
    for i in idx:
        t = _refine(orbit, section, orbit.times[i], orbit.times[i + 1])
        x = orbit(t)
        if not section.accept(x):
            continue
        if abs(section.func(x)) >= CROSSING_TOL:
            log.warning("crossing refinement stalled at |g|=%.2e", abs(section.func(x)))
        events.append(_make_event(t, x, section, field, fallback=np.sign(g[i + 1] - g[i])))
        if max_count is not None and len(events) >= max_count:
            break
    return events


def _make_event(t, x, section, field, fallback=1.0):
    if field is None:
        return CrossingEvent(float(t), x, int(fallback) or 1)
    Bx = field.B(x, check=False)
    gr = np.asarray(section.grad(x))
    rate = float(gr @ Bx)
    transverse = abs(rate) >= TRANSVERSE_TOL * np.linalg.norm(Bx) * np.linalg.norm(gr)
    return CrossingEvent(float(t), x, 1 if rate > 0 else -1, bool(transverse))


def trace_returns(field: FieldModel, start, section: SectionSpec, n_returns, t_guess=10.0,
                  rtol=1e-10, atol=1e-12, max_chunks=1000):
    """Trace until ``n_returns`` positive, transverse crossings are found.

    The start point counts as crossing zero when it lies on the section.
    Returns ``(orbit, events)`` with ``len(events) == n_returns + 1`` when
    the start is on the section.
    """
    start = np.asarray(start, dtype=float)
    pieces = []
    events = []
    on_section = abs(section.func(start)) < CROSSING_TOL and section.accept(start)
    if on_section:
        events.append(_make_event(0.0, start, section, field))
    want = n_returns + (1 if on_section else 0)
    t0, x0 = 0.0, start
    chunk = float(t_guess) * max(n_returns, 1)
    status = "ok"
    for _ in range(max_chunks):
        seg = trace(field, x0, t0 + chunk, rtol=rtol, atol=atol, t0=t0)
        pieces.append(seg)
        for ev in find_crossings(seg, section, field=field):
            if ev.t <= t0:
                continue
            if ev.direction > 0 and ev.transverse:
                events.append(ev)
            if len(events) >= want:
                break
        if seg.status != "ok":
            status = seg.status
            break
        if len(events) >= want:
            break
        t0, x0 = seg.times[-1], seg.points[-1]
        have = max(len(events) - (1 if on_section else 0), 1)
        chunk = max(chunk * 0.25, (t0 / have) * (want - len(events) + 2))
    orbit = OrbitSegment(times=np.concatenate([p.times if i == 0 else p.times[1:]
                                               for i, p in enumerate(pieces)]),
                         points=np.concatenate([p.points if i == 0 else p.points[1:]
                                                for i, p in enumerate(pieces)]),
                         status=status, sols=[s for p in pieces for s in p.sols])
    orbit.crossings = events[:want]
    return orbit, events[:want]


# ------------------------------------------------------------ phi-parametrised

def _phi_rhs(field, n):
    def f(phi, y):
        R, Z = y[:n], y[n:2 * n]
        BR, Bphi, BZ = field.B_cyl(R, np.full(n, phi), Z)
        inv = R / Bphi
        return np.concatenate([BR * inv, BZ * inv, inv])
    return f


def return_times_to_plane(field: FieldModel, R, Z, phi0=0.0, turns=1, rtol=1e-11, atol=1e-12,
                          chunk=512, strict=True, t_budget=np.inf):
    """First-return data to the plane ``phi = phi0`` for many points at once.

    Integrates ``(R, Z, t)`` in ``phi`` over ``turns`` toroidal transits.
    Requires ``B_phi > 0`` along the lines (checked at the end points).
    Points are processed in fixed-size chunks so results do not depend on
    how the work is split.  Returns ``(R_end, Z_end, T)``; with
    ``strict=False`` failures (leaving the domain, exceeding ``t_budget``)
    are not raised but reported in a fourth boolean ``ok`` array.
    """
    R = np.atleast_1d(np.asarray(R, dtype=float))
    Z = np.atleast_1d(np.asarray(Z, dtype=float))
    shape = R.shape
    R, Z = R.ravel(), Z.ravel()
    x0 = cyl_to_cart(R, phi0, Z)
    if not np.all(field.in_domain(x0)):
        raise DomainError("section point outside field domain")
    _, Bphi0, _ = field.B_cyl(R, np.full(R.size, phi0), Z)
    if np.any(Bphi0 <= 0):
        raise ValueError("plane section not transverse: B_phi <= 0 at some points")
    out = np.empty((3, R.size))
    for lo in range(0, R.size, chunk):
        sl = slice(lo, lo + chunk)
        n = R[sl].size
        y0 = np.concatenate([R[sl], Z[sl], np.zeros(n)])
        res = solve_ivp(_phi_rhs(field, n), (phi0, phi0 + TWO_PI * turns), y0, method="DOP853",
                        rtol=rtol, atol=atol)
        if res.status != 0:
            if strict:
                raise RuntimeError(f"phi integration failed: {res.message}")
            out[:, sl] = np.nan
            continue
        out[:, sl] = res.y[:, -1].reshape(3, n)
    Re, Ze, T = out
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(T) & (T > 0) & (T <= t_budget)
    ok[ok] = field.in_domain(cyl_to_cart(Re[ok], phi0, Ze[ok]))
    if strict:
        if not np.all(ok):
            raise DomainError("field line left the domain (or exceeded the time budget) "
                              "before returning")
        return Re.reshape(shape), Ze.reshape(shape), T.reshape(shape)
    return Re.reshape(shape), Ze.reshape(shape), T.reshape(shape), ok.reshape(shape)


@dataclass
class TurnSeries:
    """Successive intersections of one field line with ``phi = phi0``.

    ``R[k], Z[k]`` is the k-th return (k = 0 is the start) and ``t[k]``
    the field-line time at which it happens.  When traced with a
    ``center``, ``theta[k]`` is the continuously unwrapped poloidal angle
    about that point.
    """

    R: np.ndarray
    Z: np.ndarray
    t: np.ndarray
    phi0: float
    theta: np.ndarray | None = None
    center: tuple | None = None

    @property
    def return_times(self):
        return np.diff(self.t)

    @property
    def points(self):
        return cyl_to_cart(self.R, self.phi0, self.Z)

    def __len__(self):
        return len(self.t) - 1


def trace_turns(field: FieldModel, R, Z, n_turns, phi0=0.0, center=None, rtol=1e-11,
                atol=1e-12) -> TurnSeries:
    """Follow one field line for ``n_turns`` toroidal transits.

    Uses ``phi`` as the independent variable (Fortran DOP853 with a scalar
    right-hand side), so each return to the plane is hit exactly, without
    event location.  Needs ``B_phi > 0`` along the line.  With ``center =
    (Rc, Zc)`` the poloidal angle about the center is integrated as well.
    """
    R, Z = float(R), float(Z)
    if not field.in_domain(cyl_to_cart(R, phi0, Z)):
        raise DomainError("start point outside field domain")
    Rc, Zc = center if center is not None else (np.nan, np.nan)

    def rhs(phi, y):
        BR, Bphi, BZ = field.B_cyl_point(y[0], phi, y[1])
        if Bphi <= 0:
            raise ValueError("B_phi <= 0: plane section not transverse")
        inv = y[0] / Bphi
        dR, dZ = BR * inv, BZ * inv
        if center is None:
            return [dR, dZ, inv]
        d, z = y[0] - Rc, y[1] - Zc
        return [dR, dZ, inv, (d * dZ - z * dR) / (d * d + z * z)]

    y0 = [R, Z, 0.0]
    if center is not None:
        y0.append(float(np.arctan2(Z - Zc, R - Rc)))
    solver = ode(rhs).set_integrator("dop853", rtol=rtol, atol=atol, nsteps=10**6)
    solver.set_initial_value(y0, phi0)
    out = np.empty((n_turns + 1, len(y0)))
    out[0] = y0
    for k in range(1, n_turns + 1):
        out[k] = solver.integrate(phi0 + TWO_PI * k)
        if not solver.successful():
            raise RuntimeError(f"phi integration failed at turn {k}")
        if field.domain_margin(cyl_to_cart(out[k, 0], phi0, out[k, 1])) <= 0:
            raise DomainError(f"field line left the domain at turn {k}")
    theta = out[:, 3].copy() if center is not None else None
    return TurnSeries(out[:, 0], out[:, 1], out[:, 2], phi0, theta,
                      None if center is None else (float(Rc), float(Zc)))


def return_map(field, R, Z, phi0=0.0, **kw):
    """Poincare map of the plane ``phi = phi0``: ``(R, Z) -> (R', Z')``."""
    Re, Ze, _ = return_times_to_plane(field, R, Z, phi0, **kw)
    return Re, Ze


# ------------------------------------------------------------ magnetic axis

@dataclass
class AxisResult:
    point: np.ndarray
    period: float
    converged: bool
    iterations: int
    residual: float
    step: float = np.nan
    degenerate: bool = False
    message: str = ""


def find_magnetic_axis(field: FieldModel, guess, phi0=None, tol=1e-10, ftol=1e-14, max_iter=50,
                       h=1e-6, rtol=1e-12, atol=1e-13) -> AxisResult:
    """Newton iteration for the fixed point of the ``phi = phi0`` return map.

    ``guess`` is a Cartesian point; its toroidal angle defines the plane
    unless ``phi0`` is given.  The Jacobian is a central finite difference
    of the return map.  Stops when the Newton step drops below ``tol`` or
    the fixed-point residual ``|P(x) - x|`` drops below ``ftol`` (the
    latter matters when the axis winding is an integer and ``DP - I`` is
    singular, where Newton only converges linearly).  Failure is reported
    through ``converged=False`` with the last iterate.
    """
    guess = np.asarray(guess, dtype=float)
    R, ph, Z = cart_to_cyl(guess)
    if phi0 is None:
        phi0 = float(ph)
    x = np.array([R, Z], dtype=float)
    step = resid = np.inf
    T = np.nan
    kw = dict(rtol=rtol, atol=atol)

    def fail(it, msg):
        return AxisResult(cyl_to_cart(x[0], phi0, x[1]), T, False, it, resid, step, message=msg)

    for it in range(1, max_iter + 1):
        Rs = x[0] + np.array([0, h, -h, 0, 0])
        Zs = x[1] + np.array([0, 0, 0, h, -h])
        try:
            Re, Ze, Ts = return_times_to_plane(field, Rs, Zs, phi0, **kw)
        except (DomainError, ValueError, RuntimeError) as exc:
            return fail(it, str(exc))
        F = np.array([Re[0] - x[0], Ze[0] - x[1]])
        T = float(Ts[0])
        resid = float(np.linalg.norm(F))
        J = np.array([[(Re[1] - Re[2]) / (2 * h), (Re[3] - Re[4]) / (2 * h)],
                      [(Ze[1] - Ze[2]) / (2 * h), (Ze[3] - Ze[4]) / (2 * h)]]) - np.eye(2)
        degenerate = bool(np.linalg.cond(J) > 1e8)
        if resid < ftol:
            return AxisResult(cyl_to_cart(x[0], phi0, x[1]), T, True, it, resid, step, degenerate)
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            return fail(it, "singular return-map Jacobian")
        x = x + dx
        step = float(np.linalg.norm(dx))
        if not np.all(np.isfinite(x)):
            return fail(it, "non-finite Newton iterate")
        if step < tol:
            try:
                Re, Ze, Ts = return_times_to_plane(field, x[0], x[1], phi0, **kw)
            except (DomainError, ValueError, RuntimeError) as exc:
                return fail(it, str(exc))
            resid = float(np.hypot(Re[()] - x[0], Ze[()] - x[1]))
            return AxisResult(cyl_to_cart(x[0], phi0, x[1]), float(Ts[()]), True, it, resid, step,
                              degenerate)
    return fail(max_iter, "Newton did not converge")
