"""Period lattice of the commuting (u, B) action on a flux surface.

When ``u`` is a symmetry field commuting with ``B``, the map
``t = (t_u, t_B) -> phi_t(x)`` (flow ``u`` for ``t_u``, then ``B`` for
``t_B``) is an R^2 action whose isotropy at any point of a regular torus is
a lattice ``Gamma``.  Generators ``T1, T2`` are found by root finding on
``phi_t(seed) = seed`` and reduced to a short basis.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field
from fractions import Fraction

import numpy as np
from scipy.integrate import solve_ivp

from .field import CapabilityError, FieldModel

log = logging.getLogger(__name__)


class NotASymmetryError(ValueError):
    pass


class LatticeError(RuntimeError):
    pass


class DegenerateLatticeError(LatticeError):
    pass


@dataclass
class ActionFlow:
    """The R^2 action generated by ``field.u`` and ``field.B``."""

    field: FieldModel
    comm_tol: float = 1e-7
    rtol: float = 1e-12
    atol: float = 1e-13

    def __post_init__(self):
        if not self.field.has_u:
            raise CapabilityError("the action needs a field with a symmetry field u")

    def _flow(self, which, x, t):
        x = np.asarray(x, dtype=float)
        if t == 0:
            return x.copy()
        if which == "u":
            f = lambda s, y: self.field.u(y, check=False)
        else:
            f = lambda s, y: self.field.B_point(y)
        res = solve_ivp(f, (0.0, t), x, method="DOP853", rtol=self.rtol, atol=self.atol)
        if res.status != 0:
            raise LatticeError(f"{which}-flow integration failed: {res.message}")
        return res.y[:, -1]

    def flow_u(self, x, t):
        return self._flow("u", x, t)

    def flow_B(self, x, t):
        return self._flow("B", x, t)

    def apply(self, x, t):
        """``u`` first, then ``B`` (no commutation check)."""
        return self.flow_B(self.flow_u(x, t[0]), t[1])

    def jacobian(self, y):
        """Columns ``u(y), B(y)``: derivative of the action at ``phi_t(x) = y``."""
        return np.column_stack([self.field.u(y, check=False), self.field.B_point(y)])


def flow_action(action: ActionFlow, x, t, check=True):
    """Point reached from ``x`` by flowing ``t_u`` along u and ``t_B`` along B.

    With ``check`` the reverse composition is computed too and the two must
    agree to ``action.comm_tol``.
    """
    t = (float(t[0]), float(t[1]))
    y = action.apply(x, t)
    if check and t[0] != 0 and t[1] != 0:
        y2 = action.flow_u(action.flow_B(x, t[1]), t[0])
        gap = float(np.linalg.norm(y - y2))
        if gap > action.comm_tol:
            raise NotASymmetryError(f"u and B flows do not commute: endpoint gap {gap:.3e}")
    return y


@dataclass
class LatticeBasis:
    T1: np.ndarray
    T2: np.ndarray
    Delta: float
    surface_label: float | None = None
    seed: np.ndarray | None = None
    closure: tuple = (np.nan, np.nan)
    candidates: list = dc_field(default_factory=list, repr=False)

    @property
    def matrix(self):
        return np.column_stack([self.T1, self.T2])


@dataclass
class QuasisymmetricForm:
    kind: str                       # "quasisymmetric" or "general"
    tau: float = np.nan
    T: float = np.nan
    c: float = np.nan
    unimodular: np.ndarray | None = None


def polish_lattice_vector(action: ActionFlow, seed, t0, tol=1e-10, max_iter=30):
    """Gauss-Newton on ``phi_t(seed) - seed``; returns ``(t, residual, ok)``."""
    seed = np.asarray(seed, dtype=float)
    t = np.array(t0, dtype=float)
    res = np.inf
    for _ in range(max_iter):
        y = action.apply(seed, t)
        F = y - seed
        res = float(np.linalg.norm(F))
        if res < tol:
            return t, res, True
        step = np.linalg.lstsq(action.jacobian(y), -F, rcond=None)[0]
        t = t + step
        if np.linalg.norm(step) < 1e-15 * max(1.0, np.linalg.norm(t)):
            break
    y = action.apply(seed, t)
    res = float(np.linalg.norm(y - seed))
    return t, res, res < tol


def _vec(action, which):
    f = action.field
    if which == "u":
        return lambda y: f.u(y, check=False)
    return f.B_point


class _OrbitPiece:
    """Dense orbit of one flow through ``seed`` for times in ``[-L, L]``."""

    def __init__(self, action, seed, which, L, n_samples=2000):
        self.vec = _vec(action, which)
        rhs = lambda s, y: self.vec(y)
        kw = dict(method="DOP853", rtol=action.rtol, atol=action.atol, dense_output=True)
        self.fwd = solve_ivp(rhs, (0.0, L), seed, **kw).sol
        self.bwd = solve_ivp(rhs, (0.0, -L), seed, **kw).sol
        self.L = L
        self.s = np.linspace(-L, L, n_samples)
        self.pts = np.array([self(si) for si in self.s])
        step = np.linalg.norm(np.diff(self.pts, axis=0), axis=1)
        self.tie = float(np.max(step)) ** 2

    def __call__(self, s):
        return self.fwd(s) if s >= 0 else self.bwd(s)

    def nearest(self, y):
        d2 = np.sum((self.pts - y) ** 2, axis=1)
        # a closed orbit passes the same place several times: prefer the
        # pass with the smallest |s| among (nearly) equal candidates
        near = np.nonzero(d2 <= d2.min() * (1 + 1e-6) + 1e-20 + self.tie)[0]
        local = [i for i in near if (i == 0 or d2[i] <= d2[i - 1])
                 and (i == len(d2) - 1 or d2[i] <= d2[i + 1])] or list(near)
        s = float(self.s[min(local, key=lambda i: abs(self.s[i]))])
        for _ in range(4):
            c = self(s)
            v = self.vec(c)
            s = float(np.clip(s + (y - c) @ v / (v @ v), -self.L, self.L))
        return s, self(s)


def _orbit_meetings(action, seed, mover, L_other, t_max, n_max, on_tol=1e-6):
    """Times at which the ``mover`` flow from ``seed`` meets the other
    flow's orbit through ``seed``; returns ``(t_mover, s_other)`` pairs."""
    other = "B" if mover == "u" else "u"
    piece = _OrbitPiece(action, seed, other, L_other)
    vm = _vec(action, mover)

    def ev(t, y):
        _, p = piece.nearest(y)
        w = piece.vec(p)
        v = vm(p)
        m = v - (v @ w) / (w @ w) * w
        return (y - p) @ m
    ev.direction = 1.0
    res = solve_ivp(lambda t, y: vm(y), (0.0, t_max), seed, method="DOP853",
                    rtol=action.rtol, atol=action.atol, events=[ev])
    scale = max(1.0, float(np.linalg.norm(seed)))
    out = []
    for t, y in zip(res.t_events[0], res.y_events[0]):
        if t < 1e-8 * t_max:
            continue
        s, p = piece.nearest(y)
        if np.linalg.norm(y - p) < on_tol * scale and abs(s) < piece.L:
            out.append((float(t), s))
        if len(out) >= n_max:
            break
    return out


def _int_row_basis(rows):
    """Basis (2 rows) of the integer row lattice spanned by ``rows``."""
    rows = [list(map(int, r)) for r in rows]
    # Euclid on the first column
    while sum(1 for r in rows if r[0] != 0) > 1:
        nz = sorted((r for r in rows if r[0] != 0), key=lambda r: abs(r[0]))
        p = nz[0]
        for r in nz[1:]:
            q = r[0] // p[0]
            r[0] -= q * p[0]
            r[1] -= q * p[1]
    lead = [r for r in rows if r[0] != 0]
    g = 0
    for r in rows:
        if r[0] == 0:
            g = math.gcd(g, abs(r[1]))
    if not lead or g == 0:
        raise DegenerateLatticeError("lattice vectors do not span a rank-2 lattice")
    return lead[0], [0, g]


def _lattice_from_vectors(vectors, max_den=256, tol=1e-6):
    """Basis of the lattice generated by real vectors known to lie in it."""
    vs = [np.asarray(v, dtype=float) for v in vectors]
    b1 = vs[0]
    b2 = None
    for v in vs[1:]:
        if abs(b1[0] * v[1] - b1[1] * v[0]) > 1e-6 * np.linalg.norm(b1) * np.linalg.norm(v):
            b2 = v
            break
    if b2 is None:
        raise DegenerateLatticeError("found lattice vectors are all parallel")
    for v in vs:
        M = np.column_stack([b1, b2])
        c = np.linalg.solve(M, v)
        fr = [Fraction(float(ci)).limit_denominator(max_den) for ci in c]
        if any(abs(float(f) - ci) > tol for f, ci in zip(fr, c)):
            log.warning("vector %s not commensurate with current basis; skipped", v)
            continue
        q = math.lcm(fr[0].denominator, fr[1].denominator)
        if q == 1:
            continue
        r0, r1 = _int_row_basis([[q, 0], [0, q], [int(fr[0] * q), int(fr[1] * q)]])
        b1, b2 = (r0[0] * b1 + r0[1] * b2) / q, (r1[0] * b1 + r1[1] * b2) / q
    return b1, b2


def lagrange_reduce(b1, b2):
    b1, b2 = np.asarray(b1, dtype=float).copy(), np.asarray(b2, dtype=float).copy()
    for _ in range(200):
        if b1 @ b1 > b2 @ b2:
            b1, b2 = b2, b1
        mu = round(float(b1 @ b2) / float(b1 @ b1))
        if mu == 0:
            break
        b2 = b2 - mu * b1
    if b1 @ b1 > b2 @ b2:
        b1, b2 = b2, b1
    return b1, b2


def find_lattice_generators(action: ActionFlow, seed, t_max_u=20.0, t_max_B=40.0,
                            n_candidates=8, tol=1e-10, surface_label=None) -> LatticeBasis:
    """Reduced generators of the isotropy lattice of the action at ``seed``.

    Candidates come from the first meetings of each flow's orbit with the
    other flow's orbit through the seed (followed for ``t_max_u`` and
    ``t_max_B``); each is polished by Gauss-Newton on ``phi_t(seed) =
    seed`` and the lattice they generate is reduced.
    """
    seed = np.asarray(seed, dtype=float)
    f = action.field
    u0 = f.u(seed)
    B0 = f.B_point(seed)
    nu, nb = np.linalg.norm(u0), np.linalg.norm(B0)
    if nu == 0 or nb == 0:
        raise DegenerateLatticeError("u or B vanishes at the seed")
    if np.linalg.norm(np.cross(u0, B0)) < 1e-10 * nu * nb:
        raise DegenerateLatticeError("u and B are parallel at the seed")
    # flowing t along one field lands on the other's orbit at its time s:
    # (t, -s) resp. (-s, t) is then a lattice vector
    cands = [(t, -s) for t, s in _orbit_meetings(action, seed, "u", t_max_B, t_max_u,
                                                 n_candidates)]
    cands += [(-s, t) for t, s in _orbit_meetings(action, seed, "B", t_max_u, t_max_B,
                                                  n_candidates)]
    # meetings are accurate to the on-orbit tolerance, enough to generate
    # the lattice; only the reduced generators are polished
    found = [np.array(c) for c in cands]
    if len(found) < 2:
        raise LatticeError("orbit meetings produced fewer than two lattice vectors")
    b1, b2 = _lattice_from_vectors(found, tol=1e-4)
    b1, b2 = lagrange_reduce(b1, b2)
    det = b1[0] * b2[1] - b1[1] * b2[0]
    if abs(det) < 1e-10 * np.linalg.norm(b1) * np.linalg.norm(b2):
        raise DegenerateLatticeError("near-parallel generators")
    if det < 0:
        b2 = -b2
        det = -det
    # polish the final generators themselves
    b1, r1, ok1 = polish_lattice_vector(action, seed, b1, tol=tol)
    b2, r2, ok2 = polish_lattice_vector(action, seed, b2, tol=tol)
    if not (ok1 and ok2):
        raise LatticeError("reduced generators do not close the orbit")
    det = float(b1[0] * b2[1] - b1[1] * b2[0])
    return LatticeBasis(b1, b2, det, surface_label, seed, (r1, r2), found)


def _ext_gcd(a, b):
    if b == 0:
        return (1 if a >= 0 else -1), 0, abs(a)
    x, y, g = _ext_gcd(b, a % b)
    return y, x - (a // b) * y, g


def classify_quasisymmetric_form(basis: LatticeBasis, tol=1e-8, search=6) -> QuasisymmetricForm:
    """Look for a unimodular change of basis making the generator matrix
    upper triangular, ``[[tau, c], [0, T]]``.

    Small integer combinations ``a T1 + b T2`` with a negligible B-time are
    tried; the shortest becomes ``(tau, 0)`` and is completed to a basis.
    ``c`` is reduced into ``(-tau/2, tau/2]``.
    """
    T1, T2 = basis.T1, basis.T2
    best = None
    for a in range(-search, search + 1):
        for b in range(-search, search + 1):
            if (a, b) == (0, 0) or math.gcd(a, b) != 1:
                continue
            v = a * T1 + b * T2
            if abs(v[1]) < tol and abs(v[0]) > tol:
                if best is None or abs(v[0]) < abs(best[2][0]):
                    best = (a, b, v)
    if best is None:
        return QuasisymmetricForm("general")
    a, b, v = best
    # complete (a, b) to a unimodular matrix [[a, c'], [b, d']] with det 1
    x, y, g = _ext_gcd(a, b)                 # a x + b y = 1
    cc, dd = -y, x
    w = cc * T1 + dd * T2
    U = np.array([[a, cc], [b, dd]])
    if v[0] < 0:
        v, w = -v, -w
        U = -U
    tau = float(v[0])
    k = math.floor(w[0] / tau + 0.5)
    if w[0] - k * tau <= -tau / 2:
        k -= 1
    w = w - k * v
    U[:, 1] = U[:, 1] - k * U[:, 0]
    return QuasisymmetricForm("quasisymmetric", tau, float(w[1]), float(w[0]), U)


# -- single-surface quantities for the quasisymmetric profile -------------

def u_period(field: FieldModel, seed, t_max=100.0, close_tol=1e-7, rtol=1e-12, atol=1e-13):
    """Period of the (closed) u-line through ``seed``."""
    seed = np.asarray(seed, dtype=float)
    u0 = field.u(seed)
    n = u0 / np.linalg.norm(u0)

    def ev(s, y):
        return n @ (y - seed)
    ev.direction = 1.0
    res = solve_ivp(lambda s, y: field.u(y, check=False), (0.0, t_max), seed,
                    method="DOP853", rtol=rtol, atol=atol, events=[ev])
    scale = max(1.0, float(np.linalg.norm(seed)))
    for s, y in zip(res.t_events[0], res.y_events[0]):
        if s > 1e-8 and np.linalg.norm(y - seed) < close_tol * scale:
            return float(s)
    raise LatticeError("u-line through the seed does not close within t_max")


def return_time_to_u_line(field: FieldModel, seed, tau=None, t_max=100.0, n_samples=256,
                          on_line_tol=1e-6, rtol=1e-12, atol=1e-13):
    """First positive B-time at which the field line through ``seed`` meets
    the seed's u-line again.

    The event function is the offset of the B-orbit from its nearest point
    ``p`` on the u-line, projected on the part of ``B(p)`` normal to
    ``u(p)``; sign changes far from the line (where the nearest point
    jumps) are rejected.
    """
    seed = np.asarray(seed, dtype=float)
    if tau is None:
        tau = u_period(field, seed)
    uf = lambda s, y: field.u(y, check=False)
    line = solve_ivp(uf, (0.0, tau), seed, method="DOP853", rtol=rtol, atol=atol,
                     dense_output=True)
    s_grid = np.linspace(0.0, tau, n_samples, endpoint=False)
    pts = line.sol(s_grid).T

    def nearest(y):
        s = s_grid[int(np.argmin(np.sum((pts - y) ** 2, axis=1)))]
        for _ in range(3):
            c = line.sol(s % tau)
            uc = field.u(c, check=False)
            s += (y - c) @ uc / (uc @ uc)
        return line.sol(s % tau)

    def ev(t, y):
        p = nearest(y)
        up = field.u(p, check=False)
        Bp = field.B_point(p)
        m = Bp - (Bp @ up) / (up @ up) * up
        return (y - p) @ m
    ev.direction = 1.0

    scale = max(1.0, float(np.linalg.norm(seed)))
    res = solve_ivp(lambda t, y: field.B_point(y), (0.0, t_max), seed, method="DOP853",
                    rtol=rtol, atol=atol, events=[ev])
    for t, y in zip(res.t_events[0], res.y_events[0]):
        if t > 1e-8 * t_max and np.linalg.norm(y - nearest(y)) < on_line_tol * scale:
            return float(t)
    raise LatticeError("B-flow did not return to the seed's u-line within t_max")
