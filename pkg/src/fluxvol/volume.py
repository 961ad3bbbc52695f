"""Volume enclosed by a flux surface, by every available reduction.

* ``volume_eq1_section``: return time times flux density, integrated over a
  transverse disk bounded by the surface.  Each quadrature node needs one
  traced transit, so this is effectively a 3D computation.
* ``volume_profile_quasisym``: ``dV/dpsi = tau(psi) T(psi)`` with the
  u-line period and the B-time to return to a u-line.
* ``volume_profile_lattice``: ``dV/dpsi = Delta(psi)``, the period-lattice
  covolume.
* ``volume_profile_general``: ``dV = Tbar dPhi``: one orbit per surface
  (mean return time) and one loop integral (flux derivative).
* ``volume_stokes_surface``: ``int x dy^dz`` over a parametrised surface.
* ``volume_poincare_boundary``: the section integral rewritten as a line
  integral of the contracted form ``eta`` around the disk boundary.
* ``volume_monte_carlo``: hit-or-miss oracle.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np
from scipy.integrate import cumulative_simpson, quad_vec
from scipy.interpolate import CubicSpline

from . import diagnostics as dg
from .field import CapabilityError, FieldModel, cyl_to_cart
from .fluxes import (LoopSpec, family_homologue, flux_derivative, fourier_section_loop,
                     grad_psi_homologue, spectral_derivative)
from .parallel import counted_map
from .symmetry import (ActionFlow, find_lattice_generators, return_time_to_u_line,
                       u_period)
from .tracer import return_times_to_plane, trace_turns

log = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi


class VolumeError(RuntimeError):
    pass


class SkippedSurfaceWarning(UserWarning):
    """A surface of a profile grid was rational, unresolved or not found."""


class DegradedQuadratureWarning(UserWarning):
    pass


# ----------------------------------------------------------------- profiles

@dataclass
class VolumeProfile:
    labels: np.ndarray
    V: np.ndarray
    dV_dlabel: np.ndarray
    method: str
    error_estimate: np.ndarray
    reference_label: float = 0.0
    reference_volume: float = 0.0
    label_kind: str = "psi"
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=float)
        self.V = np.asarray(self.V, dtype=float)
        self.dV_dlabel = np.asarray(self.dV_dlabel, dtype=float)
        self.error_estimate = np.broadcast_to(
            np.asarray(self.error_estimate, dtype=float), self.labels.shape).copy()
        n = len(self.labels)
        if not (len(self.V) == len(self.dV_dlabel) == n):
            raise ValueError("profile columns differ in length")
        if n > 1 and np.any(np.diff(self.labels) <= 0):
            raise ValueError("labels must be strictly increasing")

    def __len__(self):
        return len(self.labels)

    def violations(self):
        """Profile invariants that fail (empty list if all hold)."""
        out = []
        if len(self) > 1 and np.any(np.diff(self.V) <= 0):
            out.append("V not increasing")
        inner = self.labels != self.reference_label
        if np.any(self.dV_dlabel[inner] <= 0):
            out.append("dV/dlabel not positive")
        at_ref = np.isclose(self.labels, self.reference_label, rtol=0, atol=1e-14)
        if np.any(at_ref) and not np.allclose(self.V[at_ref], self.reference_volume):
            out.append("reference volume not reproduced")
        return out

    def value(self, label):
        """V at ``label`` by cubic Hermite interpolation."""
        from scipy.interpolate import CubicHermiteSpline
        return float(CubicHermiteSpline(self.labels, self.V, self.dV_dlabel)(label))


def integrate_profile(labels, dV, reference_volume=0.0):
    """Cumulative Simpson integral from ``labels[0]`` with a Richardson
    error estimate against the half grid (every other node)."""
    x = np.asarray(labels, dtype=float)
    y = np.asarray(dV, dtype=float)
    if len(x) < 2:
        return np.full(len(x), reference_volume), np.zeros(len(x))
    if len(x) == 2:
        V = np.array([0.0, 0.5 * (y[0] + y[1]) * (x[1] - x[0])])
        return V + reference_volume, np.array([0.0, abs(V[1])])
    V = cumulative_simpson(y, x=x, initial=0.0)
    err = np.zeros_like(V)
    if len(x) >= 5:
        Vh = cumulative_simpson(y[::2], x=x[::2], initial=0.0)
        e_even = np.abs(V[::2] - Vh) / 15.0
        err[::2] = e_even
        odd = np.arange(1, len(x), 2)
        lo = e_even[(odd - 1) // 2]
        hi = e_even[np.minimum((odd + 1) // 2, len(e_even) - 1)]
        err[odd] = np.maximum(lo, hi)
    else:
        from scipy.integrate import cumulative_trapezoid
        err = np.abs(V - cumulative_trapezoid(y, x=x, initial=0.0))
    return V + reference_volume, err


def _extrapolate_to(x0, xs, ys, order=2):
    """Polynomial extrapolation of ``ys(xs)`` to ``x0`` through the first
    ``order + 1`` points."""
    k = min(order + 1, len(xs))
    c = np.polyfit(xs[:k], ys[:k], k - 1)
    return float(np.polyval(c, x0))


def _profile_on_grid(labels, values, reference_label, evaluable):
    """Insert/fill the reference node; integrand there is extrapolated
    from the nearest computed nodes when it cannot be evaluated."""
    labels = np.asarray(labels, dtype=float)
    values = np.asarray(values, dtype=float)
    ext = False
    if labels[0] > reference_label:
        labels = np.concatenate([[reference_label], labels])
        values = np.concatenate([[np.nan], values])
    if not evaluable(labels[0]) or not np.isfinite(values[0]):
        values[0] = _extrapolate_to(labels[0], labels[1:], values[1:])
        ext = True
    return labels, values, ext


def _seed_fn(field, seed_fn, label_kind):
    if seed_fn is not None:
        return seed_fn
    if label_kind == "psi" and hasattr(field, "seed_for_psi"):
        return field.seed_for_psi
    if label_kind == "r" and hasattr(field, "point_on_surface"):
        return field.point_on_surface
    raise ValueError("no seed function for this field; pass seed_fn")


def _qs_integrand(field, psi, seed_fn=None, tau_fn=None, T_fn=None):
    seed = seed_fn(psi)
    tau = tau_fn(psi) if tau_fn is not None else u_period(field, seed)
    T = T_fn(psi) if T_fn is not None else return_time_to_u_line(field, seed, tau)
    return tau, T


def volume_profile_quasisym(field: FieldModel, psi_grid, tau_fn=None, T_fn=None, seed_fn=None,
                            reference_label=0.0, workers=1) -> VolumeProfile:
    """Profile from ``dV/dpsi = tau(psi) T(psi)``.

    By default ``tau`` is the period of the u-line through the surface seed
    and ``T`` the B-time for the seed's field line to meet that u-line
    again.  Anchored at ``V(reference_label) = 0`` (the magnetic axis for
    ``psi = 0``), where the integrand is extrapolated.
    """
    if (tau_fn is None or T_fn is None) and not field.has_u:
        raise CapabilityError("quasisymmetric profile needs a symmetry field u")
    seed_fn = _seed_fn(field, seed_fn, "psi")
    psi = np.asarray(psi_grid, dtype=float)
    inner = psi > reference_label
    out = counted_map(_qs_integrand, field, psi[inner], workers,
                      seed_fn=seed_fn, tau_fn=tau_fn, T_fn=T_fn)
    tau = np.full(len(psi), np.nan)
    T = np.full(len(psi), np.nan)
    tau[inner] = [o[0] for o in out]
    T[inner] = [o[1] for o in out]
    labels, dV, ext = _profile_on_grid(psi, tau * T, reference_label, lambda x: x > reference_label)
    V, err = integrate_profile(labels, dV)
    return VolumeProfile(labels, V, dV, "quasisym", err, reference_label, 0.0, "psi",
                         {"tau": tau, "T": T, "extrapolated_reference": ext})


def _lattice_delta(field, psi, seed_fn=None, n_seeds=1):
    action = ActionFlow(field)
    deltas = []
    for k in range(n_seeds):
        seed = seed_fn(psi) if k == 0 else _other_seed(field, seed_fn(psi), k)
        deltas.append(find_lattice_generators(action, seed, surface_label=psi).Delta)
    return deltas


def _other_seed(field, seed, k):
    """Another point on the same surface: flow the seed along B and u."""
    action = ActionFlow(field)
    return action.apply(seed, (0.7 * k, 1.3 * k))


def volume_profile_lattice(field: FieldModel, psi_grid, seed_fn=None, n_seeds=1,
                           reference_label=0.0, workers=1) -> VolumeProfile:
    """Profile from ``dV/dpsi = Delta(psi)``."""
    if not field.has_u:
        raise CapabilityError("lattice profile needs a symmetry field u")
    seed_fn = _seed_fn(field, seed_fn, "psi")
    psi = np.asarray(psi_grid, dtype=float)
    inner = psi > reference_label
    out = counted_map(_lattice_delta, field, psi[inner], workers, seed_fn=seed_fn,
                      n_seeds=n_seeds)
    delta = np.full(len(psi), np.nan)
    spread = np.zeros(len(psi))
    delta[inner] = [d[0] for d in out]
    spread[inner] = [max(d) - min(d) for d in out]
    labels, dV, ext = _profile_on_grid(psi, delta, reference_label, lambda x: x > reference_label)
    V, err = integrate_profile(labels, dV)
    return VolumeProfile(labels, V, dV, "lattice", err, reference_label, 0.0, "psi",
                         {"Delta": delta, "seed_spread": spread, "extrapolated_reference": ext})


@dataclass
class GeneralSurfaceResult:
    label: float
    iota: float
    T_bar: float
    T_bar_error: float
    dPhi: float
    dPhi_change: float
    surface_check: float
    n_turns: int
    status: str = "ok"


def _general_surface(field, label, seed_fn=None, n_turns=500, phi0=0.0, center=None,
                     loop_family=None, homologue=None, label_kind="r", n_quad=256,
                     n_modes=None, surface_tol=1e-6, n_pilot=32, min_cycles=8.0,
                     max_turns=4000, rational_tol=1e-9):
    x = np.asarray(seed_fn(label), dtype=float)
    R, Z = float(np.hypot(x[0], x[1])), float(x[2])
    # pilot trace: near-integer rotation numbers need ~1/||iota|| turns
    pilot = trace_turns(field, R, Z, n_pilot, phi0=phi0, center=center)
    rot = abs(pilot.theta[-1] - pilot.theta[0]) / (TWO_PI * n_pilot)
    dist = abs(rot - round(rot))
    want = int(math.ceil(min_cycles / dist)) if dist > 0 else max_turns
    n_turns = int(min(max_turns, max(n_turns, want)))
    turns = trace_turns(field, R, Z, n_turns, phi0=phi0, center=center)
    # surface existence: label conservation if available, else fit quality
    if field.has_psi:
        ps = field.psi(turns.points, check=False)
        check = float(np.max(np.abs(ps - ps[0])) / max(abs(ps[0]), 1e-300))
    else:
        check = np.nan
    series = dg.ReturnSeries.from_turns(turns, field=field)
    # exact periodicity is blurred by integration error; treat near-exact
    # recurrences as rational too
    rel = np.mod(series.phis[1:] - series.phis[0], 1.0)
    gap = np.minimum(rel, 1.0 - rel)
    if gap.size and gap.min() < rational_tol:
        return GeneralSurfaceResult(label, np.nan, np.nan, np.nan, np.nan, np.nan, check,
                                    n_turns, f"rational: period {int(np.argmin(gap)) + 1}")
    try:
        est = dg.estimate_iota_closest_returns(series)
        T_bar, T_err = dg.mean_return_time_trapezoid(series, est.iota)
    except (dg.RationalWindingError, dg.DegenerateSpacingError,
            dg.InsufficientDataError) as e:
        return GeneralSurfaceResult(label, np.nan, np.nan, np.nan, np.nan, np.nan, check,
                                    n_turns, f"{type(e).__name__}: {e}")
    if loop_family is not None:
        loop = loop_family(label)
    else:
        loop = fourier_section_loop(turns.R, turns.Z, center, phi0, n_modes)
        if not field.has_psi:
            check = loop.fit_residual
    if homologue is not None:
        Y = homologue(label)
    elif loop_family is not None:
        Y = family_homologue(loop_family, label)
    elif label_kind == "psi":
        Y = grad_psi_homologue(field)
    else:
        raise ValueError("need a loop family or homologue field for non-psi labels")
    dphi = flux_derivative(field, loop, Y, n_quad=n_quad, check=False)
    status = "ok" if (np.isnan(check) or check < surface_tol) else "surface-check-failed"
    return GeneralSurfaceResult(label, est.iota, T_bar, T_err, dphi.Phi, dphi.change, check,
                                n_turns, status)


def volume_profile_general(field: FieldModel, labels, seed_fn=None, loop_family=None,
                           homologue=None, label_kind="r", n_turns=500, phi0=0.0, center=None,
                           reference_label=0.0, n_quad=256, n_modes=None, workers=1,
                           surface_tol=1e-6, min_cycles=8.0, max_turns=4000) -> VolumeProfile:
    """Profile from ``dV = Tbar dPhi``.

    For each label a single field line is followed for ``n_turns``
    transits of the plane ``phi0`` (more when a pilot trace shows the
    rotation number close to an integer, up to ``max_turns``); ``Tbar`` is its mean return time
    (trapezoidal rule on the returns ordered by rotation number) and
    ``dPhi/dlabel`` the flux derivative on a poloidal loop of the surface.
    The loop comes from ``loop_family(label)`` or is fitted to the
    returns; the homologue field from ``homologue(label)``, from the loop
    family, or ``grad psi / |grad psi|^2`` for psi labels.  ``center`` is
    the magnetic-axis puncture of the plane.  Rational surfaces are skipped.
    """
    if center is None:
        raise ValueError("center (axis puncture of the section plane) is required")
    seed_fn = _seed_fn(field, seed_fn, label_kind)
    labels = np.asarray(labels, dtype=float)
    inner = labels > reference_label
    res = counted_map(_general_surface, field, labels[inner], workers, seed_fn=seed_fn,
                      n_turns=n_turns, phi0=phi0, center=center, loop_family=loop_family,
                      homologue=homologue, label_kind=label_kind, n_quad=n_quad,
                      n_modes=n_modes, surface_tol=surface_tol, min_cycles=min_cycles,
                      max_turns=max_turns)
    keep = [r for r in res if r.status == "ok"]
    for r in res:
        if r.status != "ok":
            warnings.warn(f"surface {r.label} skipped ({r.status})", SkippedSurfaceWarning,
                          stacklevel=2)
    if not keep:
        raise VolumeError("no usable surfaces in the label grid")
    lab = np.array([r.label for r in keep])
    dV = np.array([r.T_bar * abs(r.dPhi) for r in keep])
    labels2, dV2, ext = _profile_on_grid(lab, dV, reference_label, lambda x: x > reference_label)
    V, err = integrate_profile(labels2, dV2)
    # surface-level errors propagate into the integral
    node_err = np.zeros(len(labels2))
    off = len(labels2) - len(keep)
    node_err[off:] = [r.T_bar_error * abs(r.dPhi) + r.T_bar * r.dPhi_change for r in keep]
    from scipy.integrate import cumulative_trapezoid
    err = err + cumulative_trapezoid(node_err, labels2, initial=0.0)
    return VolumeProfile(labels2, V, dV2, "general", err, reference_label, 0.0, label_kind,
                         {"surfaces": res, "extrapolated_reference": ext})


# --------------------------------------------------------- section integral

@dataclass
class SectionDisk:
    """Star-shaped disk in the plane ``phi = phi0``: points
    ``center + s rho(a) (cos a, sin a)`` for ``s in [0, 1]``."""

    center: tuple
    rho: Callable | float
    phi0: float = 0.0

    def radius(self, a):
        if callable(self.rho):
            return np.asarray(self.rho(a), dtype=float)
        return np.full_like(np.asarray(a, dtype=float), float(self.rho))

    @classmethod
    def from_loop(cls, loop: LoopSpec, center, phi0=0.0):
        """Disk bounded by a fitted section loop (``fourier_section_loop``)."""
        from .fluxes import eval_fourier
        coef = loop.coef
        return cls(center, lambda a: eval_fourier(coef, a), phi0)


def polar_nodes(disk: SectionDisk, n_r, n_theta):
    """Gauss-Legendre in ``s``, trapezoid in angle; returns ``(R, Z, w)``
    with weights for ``dR dZ``."""
    xg, wg = np.polynomial.legendre.leggauss(n_r)
    s = 0.5 * (xg + 1.0)
    ws = 0.5 * wg
    a = TWO_PI * np.arange(n_theta) / n_theta
    rho = disk.radius(a)
    S, A = np.meshgrid(s, a, indexing="ij")
    Rho = np.broadcast_to(rho, S.shape)
    Rc, Zc = disk.center
    R = Rc + S * Rho * np.cos(A)
    Z = Zc + S * Rho * np.sin(A)
    w = (ws[:, None] * S * Rho ** 2) * (TWO_PI / n_theta)
    return R, Z, w


@dataclass
class SectionResult:
    V: float
    error_estimate: float
    n_nodes: int
    n_flagged: int
    n_evals: int
    signed: float


def _chunk_return_times(field, RZ, phi0=0.0, rtol=1e-11, atol=1e-12, t_budget=np.inf):
    R, Z = RZ
    out = return_times_to_plane(field, R, Z, phi0, rtol=rtol, atol=atol, strict=False,
                                t_budget=t_budget)
    return out[2], out[3]


def section_times(field, R, Z, phi0=0.0, workers=1, chunk=512, rtol=1e-11, atol=1e-12,
                  t_budget=np.inf):
    """Return times from many section points, in fixed chunks (ordered)."""
    R, Z = np.ravel(R), np.ravel(Z)
    items = [(R[i:i + chunk], Z[i:i + chunk]) for i in range(0, R.size, chunk)]
    res = counted_map(_chunk_return_times, field, items, workers, phi0=phi0, rtol=rtol,
                      atol=atol, t_budget=t_budget)
    if not res:
        return np.zeros(0), np.zeros(0, dtype=bool)
    return np.concatenate([r[0] for r in res]), np.concatenate([r[1] for r in res])


def _section_value(field, disk, n_r, n_theta, T_fn, workers, rtol, atol, t_budget):
    R, Z, w = polar_nodes(disk, n_r, n_theta)
    phi = np.full(R.shape, disk.phi0)
    if T_fn is None:
        T, ok = section_times(field, R, Z, disk.phi0, workers, rtol=rtol, atol=atol,
                              t_budget=t_budget)
        T, ok = T.reshape(R.shape), ok.reshape(R.shape)
    else:
        T, ok = np.asarray(T_fn(R, Z), dtype=float), np.ones(R.shape, dtype=bool)
    _, Bphi, _ = field.B_cyl(R, phi, Z)
    dens = np.where(ok, T * Bphi, 0.0)
    return float(np.sum(dens * w)), int(np.count_nonzero(~ok)), R.size


def volume_eq1_section(field: FieldModel, disk: SectionDisk, grid=(64, 64), T_fn=None,
                       error_estimate=True, workers=1, rtol=1e-11, atol=1e-12,
                       t_budget=np.inf) -> SectionResult:
    """Return time times flux density integrated over a section disk.

    Nodes are polar (Gauss in the scaled radius, trapezoid in angle).  For
    the plane ``phi = phi0`` the flux density is ``B_phi dR dZ``; ``T`` is
    the first-return time traced from each node unless ``T_fn(R, Z)`` is
    given.  Nodes whose return fails or exceeds ``t_budget`` are dropped
    with a warning.  The error estimate compares with a grid of half the
    size in each direction.
    """
    n_r, n_theta = grid
    before = field.n_evals
    val, bad, n = _section_value(field, disk, n_r, n_theta, T_fn, workers, rtol, atol, t_budget)
    if bad:
        warnings.warn(f"{bad} of {n} section nodes did not return; quadrature degraded",
                      DegradedQuadratureWarning, stacklevel=2)
    err = np.nan
    if error_estimate:
        v2, _, _ = _section_value(field, disk, max(1, n_r // 2), max(1, n_theta // 2), T_fn,
                                  workers, rtol, atol, t_budget)
        err = abs(val - v2)
    return SectionResult(abs(val), err, n, bad, field.n_evals - before, val)


# ------------------------------------------------------------------- Stokes

@dataclass
class SurfaceMesh:
    """Double-periodic surface sampled on an N x M grid of ``[0, 1)^2``."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise ValueError("mesh points must have shape (N, M, 3)")

    @classmethod
    def from_function(cls, f, N, M):
        t1 = np.arange(N) / N
        t2 = np.arange(M) / M
        T1, T2 = np.meshgrid(t1, t2, indexing="ij")
        return cls(np.asarray(f(T1, T2), dtype=float))

    @property
    def shape(self):
        return self.points.shape[:2]

    def derivatives(self):
        return spectral_derivative(self.points, 0), spectral_derivative(self.points, 1)

    def translated(self, shift):
        return SurfaceMesh(self.points + np.asarray(shift, dtype=float))

    def swapped(self):
        return SurfaceMesh(np.swapaxes(self.points, 0, 1))

    def triangles(self):
        N, M = self.shape
        i, j = np.meshgrid(np.arange(N), np.arange(M), indexing="ij")
        i1, j1 = (i + 1) % N, (j + 1) % M
        P = self.points
        a, b, c, d = P[i, j], P[i1, j], P[i1, j1], P[i, j1]
        t1 = np.stack([a, b, c], axis=-2).reshape(-1, 3, 3)
        t2 = np.stack([a, c, d], axis=-2).reshape(-1, 3, 3)
        return np.concatenate([t1, t2])


def torus_mesh(R0, a, N=64, M=64, Zc=0.0):
    """Circular torus; theta1 toroidal, theta2 poloidal (outward normal)."""
    def f(t1, t2):
        ph, th = TWO_PI * t1, TWO_PI * t2
        R = R0 + a * np.cos(th)
        return cyl_to_cart(R, ph, Zc + a * np.sin(th))
    return SurfaceMesh.from_function(f, N, M)


def volume_stokes_surface(mesh: SurfaceMesh, primitive="x", jac_tol=1e-12) -> float:
    """Signed volume ``int_S x dy^dz`` (or the cyclic ``y dz^dx``,
    ``z dx^dy``); positive for an outward-oriented mesh."""
    P = mesh.points
    d1, d2 = mesh.derivatives()
    n = np.cross(d1, d2)
    scale = np.max(np.linalg.norm(n, axis=-1))
    if scale == 0 or np.min(np.linalg.norm(n, axis=-1)) < jac_tol * scale:
        raise VolumeError("degenerate surface Jacobian on the mesh")
    k = {"x": 0, "y": 1, "z": 2}[primitive]
    return float(np.mean(P[..., k] * n[..., k]))


# ---------------------------------------------------- Poincare-lemma boundary

class RayReturnTime:
    """Return time on rays from ``center`` through given boundary nodes,
    sampled at ``n_s`` scaled radii and interpolated by cubic splines."""

    def __init__(self, field, center, nodes_uv, phi0=0.0, n_s=24, workers=1, rtol=1e-11,
                 atol=1e-12):
        nodes_uv = np.asarray(nodes_uv, dtype=float)
        # Chebyshev-Lobatto radii cluster at both ends of the ray
        self.s = 0.5 * (1.0 - np.cos(np.pi * np.arange(n_s) / (n_s - 1)))
        Rc, Zc = center
        R = Rc + self.s[:, None] * nodes_uv[None, :, 0]
        Z = Zc + self.s[:, None] * nodes_uv[None, :, 1]
        T, ok = section_times(field, R, Z, phi0, workers, rtol=rtol, atol=atol)
        if not np.all(ok):
            raise VolumeError("return-time evaluation failed on a contraction ray")
        self.values = T.reshape(R.shape)
        self.spline = CubicSpline(self.s, self.values, axis=0)

    def __call__(self, s):
        return self.spline(s)


def volume_poincare_boundary(field: FieldModel | None, boundary, T_interp=None, n_quad=64,
                             t_cut=30.0, quad_tol=1e-10, center=(1.0, 0.0), phi0=0.0,
                             density=None, n_s=24, workers=1):
    """Section integral of ``T beta`` as a boundary integral of the
    contracted 1-form ``eta``.

    ``boundary(theta)`` gives ``(u, v)`` offsets from ``center`` for
    ``theta in [0, 1)``.  Contracting along rays ``e^{-t} r``,
    ``eta(xi) = det[r, xi] int_{e^{-t_cut}}^1 s f(s r) ds`` where ``f`` is
    the density of ``T beta`` in ``(u, v)``; the s-integral is adaptive
    (``quad_tol``) and the loop integral is a periodic trapezoid on
    ``n_quad`` nodes.  ``density(u, v)`` replaces ``T beta`` for synthetic
    checks; otherwise ``T`` comes from ``T_interp(u, v)`` or, by default,
    from splines along traced rays, and ``beta(e_u, e_v) = -B_phi`` for
    the meridional plane.  Returns ``(V, signed)`` with ``V = |signed|``.
    """
    th = np.arange(n_quad) / n_quad
    r = np.asarray(boundary(th), dtype=float)
    if r.shape != (n_quad, 2):
        raise ValueError("boundary must return (n, 2) offsets")
    r1 = np.asarray(boundary(np.array([1.0])), dtype=float)[0]
    if np.linalg.norm(r1 - r[0]) > 1e-12 * max(1.0, np.linalg.norm(r[0])):
        raise ValueError("boundary curve is not closed")
    xi = spectral_derivative(r)
    cross = r[:, 0] * xi[:, 1] - r[:, 1] * xi[:, 0]
    Rc, Zc = center

    if density is not None:
        def f_along(s):
            return np.asarray(density(s * r[:, 0], s * r[:, 1]), dtype=float)
    else:
        if T_interp is None:
            rays = RayReturnTime(field, center, r, phi0, n_s, workers)
            T_of_s = rays
        else:
            def T_of_s(s):
                return np.asarray(T_interp(s * r[:, 0], s * r[:, 1]), dtype=float)

        def f_along(s):
            R = Rc + s * r[:, 0]
            Z = Zc + s * r[:, 1]
            _, Bphi, _ = field.B_cyl(R, np.full(R.shape, phi0), Z)
            return -T_of_s(s) * Bphi

    s_min = math.exp(-t_cut)
    integ, qerr = quad_vec(lambda s: s * f_along(s), s_min, 1.0, epsabs=quad_tol, epsrel=0.0)
    eta = cross * integ
    signed = float(np.mean(eta))
    return abs(signed), signed


def circle_boundary(radius):
    def b(th):
        a = TWO_PI * np.asarray(th, dtype=float)
        return np.stack([radius * np.cos(a), radius * np.sin(a)], axis=-1)
    return b


# -------------------------------------------------------------- Monte Carlo

@dataclass
class MonteCarloResult:
    V: float
    ci_halfwidth: float
    hits: int
    n_samples: int
    box_volume: float

    def contains(self, value):
        return abs(self.V - value) <= self.ci_halfwidth


def psi_inside(field: FieldModel, psi_max):
    def inside(x):
        ok = field.in_domain(x)
        out = np.zeros(x.shape[0], dtype=bool)
        out[ok] = field.psi(x[ok], check=False) <= psi_max
        return out
    return inside


def mesh_inside(mesh: SurfaceMesh, direction=(0.5773, 0.5774, 0.5775), chunk=4096):
    """Ray-parity inside test against the triangulated mesh (Moller-Trumbore)."""
    tri = mesh.triangles()
    v0, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    good = np.abs(det) > 1e-14
    v0, e1, e2, p, det = v0[good], e1[good], e2[good], p[good], det[good]

    def inside(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(len(x), dtype=bool)
        step = max(1, chunk // max(1, len(v0) // 256))
        for lo in range(0, len(x), step):
            xs = x[lo:lo + step]
            t = xs[:, None, :] - v0[None]
            u = np.einsum("pti,ti->pt", t, p) / det
            q = np.cross(t, e1[None])
            v = np.einsum("pti,i->pt", q, d) / det
            w = np.einsum("pti,ti->pt", q, e2) / det
            hit = (u >= 0) & (v >= 0) & (u + v <= 1) & (w > 0)
            out[lo:lo + step] = (np.count_nonzero(hit, axis=1) % 2) == 1
        return out
    return inside


def volume_monte_carlo(inside, bbox, n_samples, seed=0, batch=1_000_000) -> MonteCarloResult:
    """Hit-or-miss volume with a binomial 95% confidence half-width."""
    if n_samples <= 0:
        raise ValueError("empty estimate: n_samples must be positive")
    lo = np.asarray(bbox[0], dtype=float)
    hi = np.asarray(bbox[1], dtype=float)
    vol = float(np.prod(hi - lo))
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < n_samples:
        m = min(batch, n_samples - done)
        x = lo + (hi - lo) * rng.random((m, 3))
        hits += int(np.count_nonzero(inside(x)))
        done += m
    p = hits / n_samples
    return MonteCarloResult(vol * p, 1.96 * vol * math.sqrt(p * (1 - p) / n_samples), hits,
                            n_samples, vol)
