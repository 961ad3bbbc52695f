"""Magnetic field models.

A field is anything exposing ``B(x)`` for Cartesian points ``x`` of shape
``(3,)`` or ``(n, 3)``.  Optional capabilities are the vector potential
``A``, a flux label ``psi`` and a commuting symmetry field ``u``.

The benchmark is a large-aspect-ratio circular tokamak written in
cylindrical coordinates ``(R, phi, Z)`` (right-handed, ``R x phi = Z``)::

    psi = ((R - R0)**2 + Z**2) / 2
    B   = grad(phi) x grad(psi) + F0 grad(phi)
        = (Z/R) e_R + (F0/R) e_phi - ((R - R0)/R) e_Z

with the vector potential (fixed gauge, single valued in the domain)::

    A = (F0 Z / R) e_R - (psi / R) e_phi

An optional non-axisymmetric perturbation is added through the potential,
``dA = eps * psi * cos(m*theta - n*phi) * grad(psi)`` with
``theta = atan2(Z, R - R0)``.  Its curl, differentiated by hand, is::

    dB = -eps * psi * sin(chi) * (m e_phi - (n/R) (Z e_R - (R - R0) e_Z))

with ``chi = m*theta - n*phi``.  ``dB . grad(psi) = 0``, so the level sets
of ``psi`` stay invariant for any ``eps``; only the flow on each torus and
the axisymmetry are broken.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

TWO_PI = 2.0 * np.pi


class DomainError(ValueError):
    """A point lies outside the region where the field is defined."""


class CapabilityError(AttributeError):
    """The field does not provide the requested optional quantity."""


# ---------------------------------------------------------------- coordinates

def cyl_to_cart(R, phi, Z):
    R, phi, Z = np.broadcast_arrays(*map(np.asarray, (R, phi, Z)))
    return np.stack([R * np.cos(phi), R * np.sin(phi), Z], axis=-1).astype(float)


def cart_to_cyl(x):
    """Return ``(R, phi, Z)`` with ``phi`` in ``[0, 2 pi)``."""
    x = np.asarray(x, dtype=float)
    R = np.hypot(x[..., 0], x[..., 1])
    phi = np.mod(np.arctan2(x[..., 1], x[..., 0]), TWO_PI)
    # mod can round 2pi - tiny up to exactly 2pi
    phi = np.where(phi >= TWO_PI, 0.0, phi)
    return R, phi, x[..., 2].copy()


def cyl_components_to_cart(vR, vphi, vZ, phi):
    c, s = np.cos(phi), np.sin(phi)
    return np.stack([vR * c - vphi * s, vR * s + vphi * c, vZ], axis=-1)


def cart_components_to_cyl(v, phi):
    v = np.asarray(v, dtype=float)
    c, s = np.cos(phi), np.sin(phi)
    return (v[..., 0] * c + v[..., 1] * s,
            -v[..., 0] * s + v[..., 1] * c,
            v[..., 2])


# ---------------------------------------------------------------- base model

class FieldModel:
    """Base class for field models.

    Subclasses implement ``_B`` and whichever of ``_A``, ``_psi``, ``_u``
    they support, and set the matching ``has_*`` flags.  Public evaluators
    check the domain and count evaluated points in ``n_evals``.
    """

    has_A = False
    has_psi = False
    has_u = False
    params = None

    def __init__(self):
        self.n_evals = 0

    # subclasses override
    def in_domain(self, x):
        x = np.asarray(x, dtype=float)
        return np.ones(x.shape[:-1], dtype=bool)

    def domain_margin(self, x):
        """Positive inside the domain, zero on its boundary."""
        return 1.0

    def sample_domain(self, rng, n):
        raise NotImplementedError

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != 3:
            raise ValueError(f"points must have trailing dimension 3, got {x.shape}")
        if not np.all(self.in_domain(x)):
            raise DomainError("point outside field domain")
        return x

    def _count(self, x):
        self.n_evals += int(np.prod(x.shape[:-1], dtype=int))

    def B(self, x, check=True):
        x = self._check(x) if check else np.asarray(x, dtype=float)
        self._count(x)
        return self._B(x)

    def A(self, x, check=True):
        if not self.has_A:
            raise CapabilityError(f"{type(self).__name__} has no vector potential")
        x = self._check(x) if check else np.asarray(x, dtype=float)
        self._count(x)
        return self._A(x)

    def psi(self, x, check=True):
        if not self.has_psi:
            raise CapabilityError(f"{type(self).__name__} has no flux label")
        x = self._check(x) if check else np.asarray(x, dtype=float)
        return self._psi(x)

    def u(self, x, check=True):
        if not self.has_u:
            raise CapabilityError(f"{type(self).__name__} has no symmetry field")
        x = self._check(x) if check else np.asarray(x, dtype=float)
        return self._u(x)

    def B_cyl(self, R, phi, Z):
        """Cylindrical components ``(B_R, B_phi, B_Z)`` (no domain check)."""
        x = cyl_to_cart(R, phi, Z)
        self._count(x)
        return cart_components_to_cyl(self._B(x), np.asarray(phi, dtype=float))

    # Scalar fast paths for single field-line integration; subclasses may
    # override with plain ``math`` code.  Both count one evaluation.
    def B_point(self, x):
        self.n_evals += 1
        return self._B(np.asarray(x, dtype=float))

    def B_cyl_point(self, R, phi, Z):
        self.n_evals += 1
        x = cyl_to_cart(R, phi, Z)
        bR, bphi, bZ = cart_components_to_cyl(self._B(x), phi)
        return float(bR), float(bphi), float(bZ)


class AnalyticField(FieldModel):
    """Field assembled from plain callables, mostly for tests and scripts."""

    def __init__(self, B, A=None, psi=None, u=None, domain=None, params=None):
        super().__init__()
        self._Bf, self._Af, self._psif, self._uf = B, A, psi, u
        self._domain = domain
        self.has_A = A is not None
        self.has_psi = psi is not None
        self.has_u = u is not None
        self.params = params

    def in_domain(self, x):
        if self._domain is None:
            return super().in_domain(x)
        return self._domain(np.asarray(x, dtype=float))

    def _B(self, x):
        return np.asarray(self._Bf(x), dtype=float)

    def _A(self, x):
        return np.asarray(self._Af(x), dtype=float)

    def _psi(self, x):
        return np.asarray(self._psif(x), dtype=float)

    def _u(self, x):
        return np.asarray(self._uf(x), dtype=float)


# ---------------------------------------------------------------- tokamak

@dataclass(frozen=True)
class TokamakCircularParams:
    R0: float = 1.0
    F0: float = 1.0
    eps: float = 0.0
    m: int = 2
    n: int = 1
    domain_fraction: float = 0.95

    def __post_init__(self):
        if not self.R0 > 0:
            raise ValueError("R0 must be positive")
        if not np.isfinite(self.F0) or self.F0 == 0:
            raise ValueError("F0 must be finite and nonzero")
        if int(self.m) != self.m or int(self.n) != self.n:
            raise ValueError("perturbation mode numbers must be integers")
        if not 0 < self.domain_fraction < 1:
            raise ValueError("domain_fraction must lie in (0, 1)")


class TokamakField(FieldModel):
    """Circular tokamak with optional helical perturbation (see module doc)."""

    has_A = True
    has_psi = True

    def __init__(self, params: TokamakCircularParams):
        super().__init__()
        self.params = params
        # u = d/dphi commutes with B only when the perturbation is off
        self.has_u = params.eps == 0.0

    @property
    def r_max(self):
        return self.params.domain_fraction * self.params.R0

    def minor_radius(self, x):
        x = np.asarray(x, dtype=float)
        R = np.hypot(x[..., 0], x[..., 1])
        return np.hypot(R - self.params.R0, x[..., 2])

    def in_domain(self, x):
        return self.minor_radius(x) < self.r_max

    def domain_margin(self, x):
        return self.r_max - self.minor_radius(x)

    def sample_domain(self, rng, n, r_frac=0.9):
        """Points uniform in (r, theta, phi) with r < r_frac * r_max."""
        r = r_frac * self.r_max * rng.random(n)
        th = TWO_PI * rng.random(n)
        ph = TWO_PI * rng.random(n)
        return cyl_to_cart(self.params.R0 + r * np.cos(th), ph, r * np.sin(th))

    def _parts(self, x):
        p = self.params
        R = np.hypot(x[..., 0], x[..., 1])
        phi = np.arctan2(x[..., 1], x[..., 0])
        Z = x[..., 2]
        d = R - p.R0
        psi = 0.5 * (d * d + Z * Z)
        return R, phi, Z, d, psi

    def B_cyl(self, R, phi, Z):
        R, phi, Z = np.broadcast_arrays(*map(np.asarray, (R, phi, Z)))
        self.n_evals += R.size
        p = self.params
        d = R - p.R0
        BR, Bphi, BZ = Z / R, p.F0 / R, -d / R
        if p.eps:
            s = p.eps * 0.5 * (d * d + Z * Z) * np.sin(p.m * np.arctan2(Z, d) - p.n * phi)
            BR = BR + s * p.n * Z / R
            BZ = BZ - s * p.n * d / R
            Bphi = Bphi - s * p.m
        return BR, Bphi, BZ

    def B_cyl_point(self, R, phi, Z):
        self.n_evals += 1
        p = self.params
        d = R - p.R0
        BR, Bphi, BZ = Z / R, p.F0 / R, -d / R
        if p.eps:
            psi = 0.5 * (d * d + Z * Z)
            s = p.eps * psi * math.sin(p.m * math.atan2(Z, d) - p.n * phi)
            BR += s * p.n * Z / R
            BZ -= s * p.n * d / R
            Bphi -= s * p.m
        return BR, Bphi, BZ

    def B_point(self, x):
        X, Y, Z = x
        R = math.hypot(X, Y)
        phi = math.atan2(Y, X)
        BR, Bphi, BZ = self.B_cyl_point(R, phi, Z)
        c, s = X / R, Y / R
        return np.array([BR * c - Bphi * s, BR * s + Bphi * c, BZ])

    def _B(self, x):
        p = self.params
        R, phi, Z, d, psi = self._parts(x)
        BR = Z / R
        Bphi = p.F0 / R
        BZ = -d / R
        if p.eps:
            chi = p.m * np.arctan2(Z, d) - p.n * phi
            s = p.eps * psi * np.sin(chi)
            BR = BR + s * p.n * Z / R
            BZ = BZ - s * p.n * d / R
            Bphi = Bphi - s * p.m
        return cyl_components_to_cart(BR, Bphi, BZ, phi)

    def _A(self, x):
        p = self.params
        R, phi, Z, d, psi = self._parts(x)
        AR = p.F0 * Z / R
        Aphi = -psi / R
        AZ = np.zeros_like(R)
        if p.eps:
            f = p.eps * psi * np.cos(p.m * np.arctan2(Z, d) - p.n * phi)
            AR = AR + f * d
            AZ = AZ + f * Z
        return cyl_components_to_cart(AR, Aphi, AZ, phi)

    def _psi(self, x):
        return self._parts(x)[4]

    def _u(self, x):
        return np.stack([-x[..., 1], x[..., 0], np.zeros(x.shape[:-1])], axis=-1)

    # closed-form benchmark quantities (eps = 0)
    def point_on_surface(self, r, theta=0.0, phi=0.0):
        p = self.params
        return cyl_to_cart(p.R0 + r * np.cos(theta), phi, r * np.sin(theta))

    def seed_for_psi(self, psi):
        return self.point_on_surface(np.sqrt(2.0 * psi))

    def iota(self, r):
        """Rotation number of the surface of minor radius ``r``.  The
        perturbation integrates to zero around loops on psi-surfaces, so
        this holds for every ``eps``."""
        p = self.params
        return np.sqrt(p.R0 ** 2 - np.asarray(r) ** 2) / abs(p.F0)


def make_tokamak_field(params: TokamakCircularParams | None = None, **kw) -> TokamakField:
    if params is None:
        params = TokamakCircularParams(**kw)
    return TokamakField(params)


def field_from_config(block: dict) -> FieldModel:
    """Build a field from the ``[field]`` table of a run config."""
    block = dict(block)
    kind = block.pop("kind", None)
    if kind != "tokamak-circular":
        raise ValueError(f"unknown field kind {kind!r}")
    allowed = {f for f in TokamakCircularParams.__dataclass_fields__}
    unknown = set(block) - allowed
    if unknown:
        raise ValueError(f"unknown [field] keys: {sorted(unknown)}")
    return make_tokamak_field(TokamakCircularParams(**block))


# ---------------------------------------------------------------- consistency

@dataclass
class ConsistencyReport:
    n_samples: int
    h: float
    div_B: float
    curl_A_minus_B: float | None = None
    B_dot_grad_psi: float | None = None
    commutator_uB: float | None = None
    tolerances: dict = dc_field(default_factory=dict)

    def checks(self):
        out = {"div_B": self.div_B}
        if self.curl_A_minus_B is not None:
            out["curl_A"] = self.curl_A_minus_B
        if self.B_dot_grad_psi is not None:
            out["psi_label"] = self.B_dot_grad_psi
        if self.commutator_uB is not None:
            out["commutator"] = self.commutator_uB
        return out

    @property
    def passed(self):
        return {k: v <= self.tolerances.get(k, 1e-7) for k, v in self.checks().items()}

    @property
    def ok(self):
        return all(self.passed.values())


def _jacobian_fd(f, x, h):
    """Central-difference Jacobian ``J[..., i, j] = d f_i / d x_j``."""
    cols = []
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def check_field_consistency(field: FieldModel, n_samples=200, h=1e-5, seed=0,
                            tolerances=None) -> ConsistencyReport:
    """Finite-difference checks of the field identities at random points.

    All residuals are relative to ``|B|`` at the sample point.  Default
    tolerances: 1e-7 for div B, B.grad(psi) and [u, B]; 1e-6 for curl A.
    """
    if n_samples < 1 or not h > 0:
        raise ValueError("need n_samples >= 1 and h > 0")
    tol = {"div_B": 1e-7, "curl_A": 1e-6, "psi_label": 1e-7, "commutator": 1e-7}
    tol.update(tolerances or {})
    rng = np.random.default_rng(seed)
    x = field.sample_domain(rng, n_samples)
    Bx = field.B(x)
    Bmag = np.linalg.norm(Bx, axis=-1)

    JB = _jacobian_fd(field.B, x, h)
    rep = ConsistencyReport(n_samples, h, float(np.max(np.abs(np.trace(JB, axis1=-2, axis2=-1)) / Bmag)),
                            tolerances=tol)
    if field.has_A:
        JA = _jacobian_fd(field.A, x, h)
        curl = np.stack([JA[:, 2, 1] - JA[:, 1, 2],
                         JA[:, 0, 2] - JA[:, 2, 0],
                         JA[:, 1, 0] - JA[:, 0, 1]], axis=-1)
        rep.curl_A_minus_B = float(np.max(np.linalg.norm(curl - Bx, axis=-1) / Bmag))
    if field.has_psi:
        cols = []
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            cols.append((field.psi(x + e) - field.psi(x - e)) / (2 * h))
        grad_psi = np.stack(cols, axis=-1)
        rep.B_dot_grad_psi = float(np.max(np.abs(np.sum(Bx * grad_psi, axis=-1)) / Bmag))
    if field.has_u:
        Ju = _jacobian_fd(field.u, x, h)
        ux = field.u(x)
        bracket = np.einsum("nij,nj->ni", JB, ux) - np.einsum("nij,nj->ni", Ju, Bx)
        rep.commutator_uB = float(np.max(np.linalg.norm(bracket, axis=-1) / Bmag))
    return rep
