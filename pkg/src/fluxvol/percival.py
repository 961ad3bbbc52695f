"""Percival functional on Fourier torus embeddings.

An embedding ``x: T^2 -> R^3`` is written in polar form about a centre
``(Rc, Zc)`` of the meridional plane::

    R = Rc + rho cos(vth),   Z = Zc + rho sin(vth),
    vth = 2 pi w2 theta2 + vth~(theta),   phi = 2 pi w1 theta1 + phi~(theta)

with ``rho, vth~, phi~`` real double Fourier series (``|k1| <= K1``,
``|k2| <= K2``).  For a frequency vector ``omega``,

    P(x) = int A(x) . D  d^2theta,     D = x_{,i} omega^i.

Stationary points are embeddings with ``D`` parallel to ``B``; the
defect ``D - c B`` (``c = D.B/|B|^2``) is the Euler-Lagrange residual and
``delta P = int (D x B) . delta x``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .field import CapabilityError, FieldModel
from .volume import SurfaceMesh

log = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi


class SingularFieldError(ValueError):
    pass


class PercivalConvergenceError(RuntimeError):
    def __init__(self, msg, embedding=None, result=None, history=None):
        super().__init__(msg)
        self.embedding, self.result, self.history = embedding, result, history


@dataclass(frozen=True)
class FrequencyVector:
    w1: float
    w2: float

    def __post_init__(self):
        if not (np.isfinite(self.w1) and np.isfinite(self.w2)) or np.hypot(self.w1, self.w2) == 0:
            raise ValueError("frequency vector must be finite and nonzero")

    @property
    def iota(self):
        return self.w2 / self.w1

    @property
    def array(self):
        return np.array([self.w1, self.w2])

    def scaled(self, lam):
        return FrequencyVector(lam * self.w1, lam * self.w2)

    @classmethod
    def from_iota(cls, iota):
        return cls(1.0, float(iota))


def _as_omega(omega):
    if isinstance(omega, FrequencyVector):
        return omega
    return FrequencyVector(float(omega[0]), float(omega[1]))


def fourier_modes(K1, K2):
    """Half-plane mode list; (0, 0) first."""
    modes = [(0, 0)] + [(0, k2) for k2 in range(1, K2 + 1)]
    modes += [(k1, k2) for k1 in range(1, K1 + 1) for k2 in range(-K2, K2 + 1)]
    return np.array(modes, dtype=int)


@dataclass
class Grid:
    N1: int
    N2: int

    @property
    def theta(self):
        t1 = np.arange(self.N1) / self.N1
        t2 = np.arange(self.N2) / self.N2
        T1, T2 = np.meshgrid(t1, t2, indexing="ij")
        return T1.ravel(), T2.ravel()

    @property
    def size(self):
        return self.N1 * self.N2


class Basis:
    """Real Fourier basis and its theta-derivatives on a grid.

    Coefficient layout: ``[c00, a_1, b_1, a_2, b_2, ...]`` for the modes
    after (0, 0), with ``a`` multiplying cos and ``b`` sin.
    """

    def __init__(self, K1, K2, grid: Grid):
        self.K1, self.K2, self.grid = K1, K2, grid
        self.modes = fourier_modes(K1, K2)
        t1, t2 = grid.theta
        k = self.modes[1:]
        ph = TWO_PI * (np.outer(t1, k[:, 0]) + np.outer(t2, k[:, 1]))
        c, s = np.cos(ph), np.sin(ph)
        n = grid.size
        m = len(k)
        self.ncoef = 1 + 2 * m
        F = np.empty((n, self.ncoef))
        F[:, 0] = 1.0
        F[:, 1::2] = c
        F[:, 2::2] = s
        self.F = F
        self.d = []
        for i in range(2):
            kk = TWO_PI * k[:, i]
            Fi = np.zeros((n, self.ncoef))
            Fi[:, 1::2] = -s * kk
            Fi[:, 2::2] = c * kk
            self.d.append(Fi)

    def along(self, omega):
        return omega.w1 * self.d[0] + omega.w2 * self.d[1]


_BASIS_CACHE: dict = {}


def get_basis(K1, K2, grid: Grid) -> Basis:
    key = (K1, K2, grid.N1, grid.N2)
    b = _BASIS_CACHE.get(key)
    if b is None:
        if len(_BASIS_CACHE) > 16:
            _BASIS_CACHE.clear()
        b = _BASIS_CACHE[key] = Basis(K1, K2, grid)
    return b


@dataclass
class TorusEmbedding:
    """Fourier coefficients of ``rho``, ``vth~``, ``phi~`` (see module doc)."""

    rho: np.ndarray
    vth: np.ndarray
    vphi: np.ndarray
    K: tuple
    center: tuple = (1.0, 0.0)
    winding: tuple = (1, -1)

    def __post_init__(self):
        self.K = (int(self.K[0]), int(self.K[1]))
        n = (2 * self.K[0] + 1) * (2 * self.K[1] + 1)
        for name in ("rho", "vth", "vphi"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.shape != (n,):
                raise ValueError(f"{name} needs {n} coefficients for K={self.K}")
            setattr(self, name, a)
        if any(int(w) != w or w == 0 for w in self.winding):
            raise ValueError("winding numbers must be nonzero integers")

    @property
    def ncoef(self):
        return len(self.rho)

    @property
    def vector(self):
        return np.concatenate([self.rho, self.vth, self.vphi])

    def with_vector(self, v):
        n = self.ncoef
        return replace(self, rho=v[:n].copy(), vth=v[n:2 * n].copy(), vphi=v[2 * n:].copy())

    def default_grid(self):
        return Grid(max(4 * self.K[0] + 4, 4), max(4 * self.K[1] + 4, 4))

    # -- construction
    @classmethod
    def zeros(cls, K, center=(1.0, 0.0), winding=(1, -1)):
        n = (2 * K[0] + 1) * (2 * K[1] + 1)
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), K, center, winding)

    @classmethod
    def circular(cls, r, K=(4, 20), center=(1.0, 0.0), winding=(1, -1)):
        e = cls.zeros(K, center, winding)
        e.rho[0] = r
        return e

    @classmethod
    def from_functions(cls, rho, vth, vphi, K, center=(1.0, 0.0), winding=(1, -1), grid=None):
        """Least-squares fit of the periodic parts given as functions of
        ``(theta1, theta2)`` arrays."""
        grid = grid or Grid(max(4 * K[0] + 4, 4), max(4 * K[1] + 4, 4))
        b = get_basis(K[0], K[1], grid)
        t1, t2 = grid.theta
        fit = lambda f: np.linalg.lstsq(b.F, np.broadcast_to(f(t1, t2), t1.shape), rcond=None)[0]
        return cls(fit(rho), fit(vth), fit(vphi), K, center, winding)

    @classmethod
    def exact_tokamak(cls, field, r, K=(0, 24)):
        """Invariant torus of minor radius ``r`` of the unperturbed circular
        tokamak, parametrised so that field lines are straight."""
        p = field.params
        k = np.sqrt((p.R0 + r) / (p.R0 - r))

        def vth(t1, t2):
            x = TWO_PI * t2
            gx = 2.0 * np.arctan2((k - 1.0) * np.sin(x), (k + 1.0) + (1.0 - k) * np.cos(x))
            return -gx
        return cls.from_functions(lambda a, b: np.full_like(a, r), vth, lambda a, b: 0.0 * a,
                                  K, (p.R0, 0.0), (1, -1))

    def resized(self, K):
        """Same functions with a different mode cutoff (truncate or pad)."""
        new = TorusEmbedding.zeros(K, self.center, self.winding)
        old_modes = {tuple(m): i for i, m in enumerate(fourier_modes(*self.K))}
        for j, m in enumerate(fourier_modes(*K)):
            i = old_modes.get(tuple(m))
            if i is None:
                continue
            for name in ("rho", "vth", "vphi"):
                src, dst = getattr(self, name), getattr(new, name)
                if j == 0:
                    dst[0] = src[0]
                else:
                    dst[2 * j - 1:2 * j + 1] = src[2 * i - 1:2 * i + 1]
        return new

    # -- evaluation
    def fields(self, grid: Grid, omega=None):
        """``q = (rho, vth, phi)`` on the grid and their omega-derivatives."""
        b = get_basis(self.K[0], self.K[1], grid)
        t1, t2 = grid.theta
        w1, w2 = self.winding
        q = np.stack([b.F @ self.rho,
                      TWO_PI * w2 * t2 + b.F @ self.vth,
                      TWO_PI * w1 * t1 + b.F @ self.vphi])
        if omega is None:
            return q, None
        Fw = b.along(omega)
        qw = np.stack([Fw @ self.rho,
                       TWO_PI * w2 * omega.w2 + Fw @ self.vth,
                       TWO_PI * w1 * omega.w1 + Fw @ self.vphi])
        return q, qw

    def points(self, grid: Grid):
        q, _ = self.fields(grid)
        return _position(q, self.center)

    def mean_minor_radius(self, grid=None):
        grid = grid or self.default_grid()
        q, _ = self.fields(grid)
        return float(np.mean(q[0]))

    def to_mesh(self, N1=64, N2=64) -> SurfaceMesh:
        """Sampled surface with outward orientation (poloidal sense flipped
        when the vth winding is negative)."""
        x = self.points(Grid(N1, N2)).reshape(N1, N2, 3)
        w1, w2 = self.winding
        if w1 * w2 < 0:
            x = x[:, ::-1]
        return SurfaceMesh(x)


# -- pointwise geometry --------------------------------------------------------

def _position(q, center):
    rho, vth, phi = q
    R = center[0] + rho * np.cos(vth)
    Z = center[1] + rho * np.sin(vth)
    return np.stack([R * np.cos(phi), R * np.sin(phi), Z], axis=-1)


def _frames(q, center):
    rho, vth, phi = q
    R = center[0] + rho * np.cos(vth)
    cp, sp = np.cos(phi), np.sin(phi)
    eR = np.stack([cp, sp, np.zeros_like(cp)], axis=-1)
    ephi = np.stack([-sp, cp, np.zeros_like(cp)], axis=-1)
    ez = np.zeros_like(eR)
    ez[:, 2] = 1.0
    cv, sv = np.cos(vth)[:, None], np.sin(vth)[:, None]
    dx_drho = cv * eR + sv * ez
    dx_dvth = rho[:, None] * (-sv * eR + cv * ez)
    dx_dphi = R[:, None] * ephi
    return dx_drho, dx_dvth, dx_dphi


def _D(q, qw, center):
    frames = _frames(q, center)
    return sum(f * qw[i][:, None] for i, f in enumerate(frames)), frames


def _perp_residual(field, q, qw, center):
    x = _position(q, center)
    D, frames = _D(q, qw, center)
    B = field.B(x, check=False)
    BB = np.sum(B * B, axis=1)
    if np.any(BB == 0):
        raise SingularFieldError("B vanishes on the embedding")
    c = np.sum(D * B, axis=1) / BB
    return D - c[:, None] * B, c, B, D, frames, x


# -- public operations ------------------------------------------------------------

@dataclass
class PercivalResult:
    P: float
    residual: float
    c_field: np.ndarray = dc_field(repr=False)
    c_bar: float = np.nan
    grid: tuple = ()

    @property
    def helicity_ratio(self):
        """``P / c_bar``."""
        return self.P / self.c_bar


def eval_P(field: FieldModel, x: TorusEmbedding, omega, grid: Grid | None = None) -> float:
    """``int A(x) . x_{,i} omega^i d^2theta`` by the periodic trapezoidal rule."""
    if not field.has_A:
        raise CapabilityError("the Percival functional needs a vector potential")
    omega = _as_omega(omega)
    grid = grid or x.default_grid()
    q, qw = x.fields(grid, omega)
    D, _ = _D(q, qw, x.center)
    A = field.A(_position(q, x.center), check=False)
    return float(np.mean(np.sum(A * D, axis=1)))


def first_variation_residual(field: FieldModel, x: TorusEmbedding, omega,
                             grid: Grid | None = None) -> PercivalResult:
    """Defect of ``D = x_{,i} omega^i`` from being parallel to ``B``:
    ``c = D.B/|B|^2`` pointwise and ``residual = ||D - c B||`` (grid RMS)."""
    omega = _as_omega(omega)
    grid = grid or x.default_grid()
    q, qw = x.fields(grid, omega)
    res, c, *_ = _perp_residual(field, q, qw, x.center)
    rms = float(np.sqrt(np.mean(np.sum(res * res, axis=1))))
    P = eval_P(field, x, omega, grid) if field.has_A else np.nan
    return PercivalResult(P, rms, c, float(np.mean(c)), (grid.N1, grid.N2))


def gradient_density(field: FieldModel, x: TorusEmbedding, omega, grid: Grid | None = None):
    """``D x B`` on the grid: ``delta P = int (D x B) . delta x``."""
    omega = _as_omega(omega)
    grid = grid or x.default_grid()
    q, qw = x.fields(grid, omega)
    D, _ = _D(q, qw, x.center)
    B = field.B(_position(q, x.center), check=False)
    return np.cross(D, B)


def directional_derivative(field, x: TorusEmbedding, omega, direction, grid=None):
    """``delta P`` along a coefficient direction, from the variation formula."""
    omega = _as_omega(omega)
    grid = grid or x.default_grid()
    G = gradient_density(field, x, omega, grid)
    q, _ = x.fields(grid)
    frames = _frames(q, x.center)
    b = get_basis(x.K[0], x.K[1], grid)
    n = x.ncoef
    dq = [b.F @ direction[i * n:(i + 1) * n] for i in range(3)]
    dx = sum(f * dq[i][:, None] for i, f in enumerate(frames))
    return float(np.mean(np.sum(G * dx, axis=1)))


def variation_check(field, x: TorusEmbedding, omega, n_dirs=20, h=1e-6, seed=0, grid=None):
    """Compare the variation formula with central differences of ``P``
    along random coefficient directions; returns the relative errors."""
    omega = _as_omega(omega)
    grid = grid or x.default_grid()
    rng = np.random.default_rng(seed)
    v0 = x.vector
    errs = []
    for _ in range(n_dirs):
        d = rng.standard_normal(v0.size)
        d /= np.linalg.norm(d)
        fd = (eval_P(field, x.with_vector(v0 + h * d), omega, grid)
              - eval_P(field, x.with_vector(v0 - h * d), omega, grid)) / (2 * h)
        an = directional_derivative(field, x, omega, d, grid)
        errs.append(abs(fd - an) / max(abs(an), abs(fd), 1e-300))
    return np.array(errs)


def flux_from_dP_domega(field, x_solver, omega, h=1e-3, grid=None):
    """``(dP/domega_1, dP/domega_2)`` by central differences of ``P`` at
    stationary embeddings ``x_solver(omega)``."""
    omega = _as_omega(omega)
    out = []
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        vals = []
        for sgn in (1, -1):
            w = FrequencyVector(*(omega.array + sgn * e))
            emb = x_solver(w)
            vals.append(eval_P(field, emb, w, grid or emb.default_grid()))
        out.append((vals[0] - vals[1]) / (2 * h))
    return tuple(out)


def exact_tokamak_solver(field, K=(0, 24)):
    """``omega -> exact invariant torus with iota = omega2/omega1``
    (unperturbed circular tokamak)."""
    p = field.params

    def solve(omega):
        iota = omega.w2 / omega.w1
        r = np.sqrt(p.R0 ** 2 - (p.F0 * iota) ** 2)
        return TorusEmbedding.exact_tokamak(field, r, K)
    return solve


def _jacobian(field, x: TorusEmbedding, omega, grid, h=1e-7):
    """Residual ``P_perp D`` (stacked, RMS-scaled) and its Jacobian."""
    b = get_basis(x.K[0], x.K[1], grid)
    q, qw = x.fields(grid, omega)
    res, c, B, D, frames, _ = _perp_residual(field, q, qw, x.center)
    bhat = B / np.linalg.norm(B, axis=1)[:, None]

    def perp(v):
        return v - np.sum(v * bhat, axis=1)[:, None] * bhat
    G = [perp(f) for f in frames]
    H = []
    for i in range(3):
        qp, qm = q.copy(), q.copy()
        qp[i] += h
        qm[i] -= h
        rp = _perp_residual(field, qp, qw, x.center)[0]
        rm = _perp_residual(field, qm, qw, x.center)[0]
        H.append((rp - rm) / (2 * h))
    Fw = b.along(omega)
    n = grid.size
    blocks = []
    for i in range(3):
        Ji = G[i][:, :, None] * Fw[:, None, :] + H[i][:, :, None] * b.F[:, None, :]
        blocks.append(Ji.reshape(3 * n, -1))
    scale = 1.0 / np.sqrt(n)
    return res.reshape(-1) * scale, np.hstack(blocks) * scale


def solve_stationary(field: FieldModel, omega, init: TorusEmbedding, K=None, grid=None,
                     tol=1e-8, max_iter=40, rcond=1e-12, gauge="toroidal"):
    """Gauss-Newton on the grid defect ``D - c B`` over the Fourier
    coefficients, ``c`` eliminated pointwise.

    Stationary embeddings come in families: any reparametrisation
    ``theta -> theta + alpha(theta) omega`` keeps ``D`` parallel to ``B``.
    With ``gauge="toroidal"`` the family is cut by fixing ``phi~ = 0``
    (``theta1`` is the toroidal angle), which loses nothing when
    ``B^phi`` does not vanish; the mean of ``vth~`` pins the remaining
    phase.  With ``gauge=None`` only the two constant phases are pinned
    and the reparametrisation directions are left to minimum-norm
    least-squares steps (much slower convergence).

    Converged when the RMS defect is below ``tol``; otherwise raises
    ``PercivalConvergenceError`` carrying the last iterate.
    """
    omega = _as_omega(omega)
    x = init if K is None else init.resized(K)
    grid = grid or x.default_grid()
    n = x.ncoef
    free = np.ones(3 * n, dtype=bool)
    free[n] = False          # mean of vth~
    free[2 * n] = False      # mean of phi~
    if gauge == "toroidal":
        if np.any(x.vphi != 0):
            x = replace(x, vphi=np.zeros(n))
        free[2 * n:] = False
    elif gauge is not None:
        raise ValueError(f"unknown gauge {gauge!r}")
    history = []
    r, J = _jacobian(field, x, omega, grid)
    norm = np.linalg.norm(r)
    for it in range(max_iter):
        history.append(norm)
        if norm < tol:
            break
        step = np.zeros(3 * n)
        step[free] = np.linalg.lstsq(J[:, free], -r, rcond=rcond)[0]
        lam = 1.0
        v = x.vector
        while True:
            cand = x.with_vector(v + lam * step)
            try:
                r2, J2 = _jacobian(field, cand, omega, grid)
                n2 = np.linalg.norm(r2)
            except (ValueError, SingularFieldError):
                n2 = np.inf
            if n2 < norm or lam < 1e-4:
                break
            lam *= 0.5
        if not np.isfinite(n2) or n2 >= norm:
            res = first_variation_residual(field, x, omega, grid)
            raise PercivalConvergenceError(
                f"residual plateau at {norm:.3e} after {it} iterations", x, res, history)
        x, r, J, norm = cand, r2, J2, n2
    res = first_variation_residual(field, x, omega, grid)
    if res.residual >= tol:
        raise PercivalConvergenceError(
            f"no convergence: residual {res.residual:.3e} after {max_iter} iterations",
            x, res, history)
    res.history = history
    return x, res
