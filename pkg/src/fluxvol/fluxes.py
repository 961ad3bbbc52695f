"""Fluxes through closed loops on flux surfaces.

``loop_flux`` integrates ``A . dx`` around a closed loop; on an invariant
surface the result depends only on the loop's homology class.  The flux
derivative needs only ``B``: for a vector field ``Y`` along the loop that
points to the homologous loop on a neighbouring surface,
``dPhi = \\oint B . (Y x dx/dtheta) dtheta``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .field import CapabilityError, FieldModel, cyl_to_cart

log = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
CLOSURE_TOL = 1e-12


class DegenerateHomologueWarning(UserWarning):
    pass


def spectral_derivative(samples, axis=0):
    """d/dtheta of samples of a 1-periodic function on a uniform grid."""
    n = samples.shape[axis]
    k = np.fft.fftfreq(n, d=1.0 / n)
    if n % 2 == 0:
        k[n // 2] = 0.0
    shape = [1] * samples.ndim
    shape[axis] = n
    F = np.fft.fft(samples, axis=axis)
    return np.real(np.fft.ifft(F * (2j * np.pi * k).reshape(shape), axis=axis))


@dataclass
class LoopSpec:
    """Closed curve ``theta in [0, 1) -> R^3`` (vectorised over theta).

    ``tag`` is the homology class: ``poloidal``, ``toroidal``, ``axis`` or
    ``(p, q)``.  ``deriv`` optionally gives ``dx/dtheta`` analytically;
    otherwise it is taken spectrally from the samples.
    """

    func: Callable
    tag: object = "custom"
    deriv: Callable | None = None
    description: str = ""

    def __post_init__(self):
        x0 = np.asarray(self.func(np.array([0.0])))[0]
        x1 = np.asarray(self.func(np.array([1.0])))[0]
        if np.linalg.norm(x1 - x0) > CLOSURE_TOL * max(1.0, np.linalg.norm(x0)):
            raise ValueError("loop is not closed")

    def __call__(self, theta):
        return np.asarray(self.func(np.asarray(theta, dtype=float)), dtype=float)

    def nodes(self, n):
        th = np.arange(n) / n
        x = self(th)
        dx = self.deriv(th) if self.deriv is not None else spectral_derivative(x)
        return th, x, np.asarray(dx, dtype=float)


@dataclass
class FluxValue:
    Phi: float
    method: str
    n_quad: int = 0
    change: float = np.nan
    converged: bool = True
    reference: str | None = None

    @property
    def abs(self):
        return abs(self.Phi)


# -- loop constructors ------------------------------------------------------

def poloidal_circle(Rc, Zc, r, phi0=0.0, orientation=1):
    """Circle of radius ``r`` about ``(Rc, Zc)`` in the plane ``phi = phi0``;
    counter-clockwise in (R, Z) for ``orientation = +1``."""
    def f(th):
        a = orientation * TWO_PI * th
        return cyl_to_cart(Rc + r * np.cos(a), np.full_like(th, phi0), Zc + r * np.sin(a))

    def d(th):
        a = orientation * TWO_PI * th
        s = orientation * TWO_PI * r
        dR, dZ = -s * np.sin(a), s * np.cos(a)
        c, sn = np.cos(phi0), np.sin(phi0)
        return np.stack([dR * c, dR * sn, dZ], axis=-1)
    return LoopSpec(f, "poloidal", d, f"poloidal circle r={r} about ({Rc}, {Zc}) at phi={phi0}")


def wobbled_poloidal_loop(Rc, Zc, r, phi0=0.0, amplitude=0.3, k=2, orientation=1):
    """Poloidal loop on the circular torus of minor radius ``r`` whose
    toroidal angle oscillates, ``phi = phi0 + amplitude sin(2 pi k theta)``."""
    def f(th):
        a = orientation * TWO_PI * th
        ph = phi0 + amplitude * np.sin(TWO_PI * k * th)
        return cyl_to_cart(Rc + r * np.cos(a), ph, Zc + r * np.sin(a))
    return LoopSpec(f, "poloidal", None, f"wobbled poloidal loop r={r}")


def toroidal_loop(R, Z, orientation=1, tag="toroidal"):
    """Horizontal circle of radius ``R`` at height ``Z``, increasing phi."""
    def f(th):
        return cyl_to_cart(np.full_like(th, R), orientation * TWO_PI * th, np.full_like(th, Z))

    def d(th):
        ph = orientation * TWO_PI * th
        s = orientation * TWO_PI * R
        return np.stack([-s * np.sin(ph), s * np.cos(ph), np.zeros_like(th)], axis=-1)
    return LoopSpec(f, tag, d, f"toroidal circle R={R}, Z={Z}")


def axis_loop(R, Z=0.0):
    return toroidal_loop(R, Z, tag="axis")


def point_loop(x):
    x = np.asarray(x, dtype=float)
    return LoopSpec(lambda th: np.broadcast_to(x, th.shape + (3,)).copy(), "custom",
                    lambda th: np.zeros(th.shape + (3,)), "constant point")


def fourier_section_loop(R, Z, center, phi0=0.0, n_modes=None):
    """Star-shaped closed curve in the plane ``phi0`` fitted to points.

    The points (e.g. returns of a field line) are converted to polar
    coordinates about ``center`` and ``rho(angle)`` is least-squares fitted
    by a truncated Fourier series.  Counter-clockwise in (R, Z).
    """
    R, Z = np.asarray(R, dtype=float), np.asarray(Z, dtype=float)
    Rc, Zc = center
    ang = np.arctan2(Z - Zc, R - Rc)
    rho = np.hypot(R - Rc, Z - Zc)
    if n_modes is None:
        n_modes = max(1, min(24, len(R) // 8))
    coef = fit_fourier(ang, rho, n_modes)

    def f(th):
        a = TWO_PI * th
        r = eval_fourier(coef, a)
        return cyl_to_cart(Rc + r * np.cos(a), np.full_like(th, phi0), Zc + r * np.sin(a))
    loop = LoopSpec(f, "poloidal", None, f"fitted section loop ({n_modes} modes)")
    loop.coef = coef
    loop.fit_residual = float(np.max(np.abs(eval_fourier(coef, ang) - rho)))
    return loop


def fit_fourier(angle, values, n_modes):
    cols = [np.ones_like(angle)]
    for k in range(1, n_modes + 1):
        cols += [np.cos(k * angle), np.sin(k * angle)]
    return np.linalg.lstsq(np.column_stack(cols), values, rcond=None)[0]


def eval_fourier(coef, angle):
    out = np.full_like(np.asarray(angle, dtype=float), coef[0])
    for k in range(1, (len(coef) - 1) // 2 + 1):
        out = out + coef[2 * k - 1] * np.cos(k * angle) + coef[2 * k] * np.sin(k * angle)
    return out


# -- homologue fields ------------------------------------------------------

def radial_homologue(Rc, Zc):
    """Unit vector away from ``(Rc, Zc)`` in the meridional plane."""
    def Y(theta, x):
        R = np.hypot(x[:, 0], x[:, 1])
        c, s = x[:, 0] / R, x[:, 1] / R
        dR, dZ = R - Rc, x[:, 2] - Zc
        rr = np.hypot(dR, dZ)
        return np.stack([dR / rr * c, dR / rr * s, dZ / rr], axis=-1)
    return Y


def grad_psi_homologue(field: FieldModel, h=1e-6):
    """``grad psi / |grad psi|^2`` (central differences): displacement per
    unit change of the label psi."""
    if not field.has_psi:
        raise CapabilityError("field has no flux label; supply the homologue field Y")

    def Y(theta, x):
        g = np.empty_like(x)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            g[:, i] = (field.psi(x + e, check=False) - field.psi(x - e, check=False)) / (2 * h)
        return g / np.sum(g * g, axis=1)[:, None]
    return Y


def family_homologue(loop_family, label, h=1e-5):
    """``d loop(label, theta) / d label`` by central differences."""
    lp, lm = loop_family(label + h), loop_family(label - h)

    def Y(theta, x):
        return (lp(theta) - lm(theta)) / (2 * h)
    return Y


# -- fluxes -------------------------------------------------------------------

def _converge(fn, n_quad, tol, max_quad):
    n = int(n_quad)
    val = fn(n)
    change = np.inf
    while n < max_quad:
        n2 = 2 * n
        v2 = fn(n2)
        change = abs(v2 - val)
        n, val = n2, v2
        if change < tol:
            return val, n, change, True
    return val, n, change, change < tol


def loop_flux(field: FieldModel, loop: LoopSpec, n_quad=256, tol=1e-10, max_quad=16384,
              check=True) -> FluxValue:
    """``oint A . dx`` by the periodic trapezoidal rule, doubling ``n_quad``
    until two successive values differ by less than ``tol``."""
    if not field.has_A:
        raise CapabilityError("field has no vector potential; use flux_derivative "
                              "with a homologue field instead")

    def fn(n):
        _, x, dx = loop.nodes(n)
        return float(np.mean(np.sum(field.A(x, check=check) * dx, axis=1)))
    val, n, change, ok = _converge(fn, n_quad, tol, max_quad)
    if not ok:
        log.warning("loop flux not converged to %.1e (last change %.2e)", tol, change)
    return FluxValue(val, "A-loop", n, change, ok, loop.description)


def annulus_flux(field: FieldModel, loop: LoopSpec, axis_loop: LoopSpec, n_quad=256,
                 tol=1e-10, max_quad=16384) -> FluxValue:
    """Flux through an annulus bounded by ``loop`` and the reference
    ``axis_loop``: difference of the two loop integrals."""
    a = loop_flux(field, loop, n_quad, tol, max_quad)
    b = loop_flux(field, axis_loop, n_quad, tol, max_quad)
    return FluxValue(a.Phi - b.Phi, "annulus", max(a.n_quad, b.n_quad),
                     a.change + b.change, a.converged and b.converged, axis_loop.description)


def flux_derivative(field: FieldModel, loop: LoopSpec, Y, n_quad=256, tol=1e-10,
                    max_quad=16384, check=True) -> FluxValue:
    """Change of the loop flux per unit label step, ``oint B . (Y x dx)``.

    ``Y(theta, x)`` returns the homologue displacement at the loop nodes.
    No vector potential is needed.
    """
    scale = [0.0]

    def fn(n):
        th, x, dx = loop.nodes(n)
        Yv = np.asarray(Y(th, x), dtype=float)
        B = field.B(x, check=check)
        integrand = np.sum(B * np.cross(Yv, dx), axis=1)
        scale[0] = float(np.mean(np.linalg.norm(B, axis=1) * np.linalg.norm(Yv, axis=1)
                                 * np.linalg.norm(dx, axis=1)))
        return float(np.mean(integrand))
    val, n, change, ok = _converge(fn, n_quad, tol, max_quad)
    if abs(val) < 1e-10 * scale[0]:
        warnings.warn("homologue field is tangent to the flux surface along the loop "
                      "(i_Y beta vanishes)", DegenerateHomologueWarning, stacklevel=2)
    return FluxValue(val, "beta-loop", n, change, ok, loop.description)
