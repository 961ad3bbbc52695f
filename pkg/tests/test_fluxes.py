import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fluxvol.field import AnalyticField, CapabilityError
from fluxvol.fluxes import (DegenerateHomologueWarning, LoopSpec, annulus_flux, axis_loop,
                            flux_derivative, grad_psi_homologue, loop_flux, point_loop,
                            poloidal_circle, radial_homologue, toroidal_loop,
                            wobbled_poloidal_loop)

PHI_TOR = 2 * np.pi * (1 - np.sqrt(0.75))
DPHI_DR = np.pi / np.sqrt(0.75)


def phi_tor(r):
    return 2 * np.pi * (1 - np.sqrt(1 - r * r))


def test_toroidal_flux(tok):
    # a counter-clockwise circle in (R, Z) has normal -e_phi
    f = loop_flux(tok, poloidal_circle(1.0, 0.0, 0.5))
    assert f.converged
    assert abs(f.Phi + PHI_TOR) < 1e-10
    assert abs(f.abs - PHI_TOR) < 1e-10
    g = loop_flux(tok, poloidal_circle(1.0, 0.0, 0.5, orientation=-1))
    assert abs(g.Phi - PHI_TOR) < 1e-10


def test_point_loop(tok):
    assert loop_flux(tok, point_loop([1.2, 0.0, 0.1])).Phi == 0.0


@pytest.mark.parametrize("eps", [0.0, 0.01])
def test_homology_invariance(tok_eps, eps):
    f = tok_eps(eps)
    a = loop_flux(f, poloidal_circle(1.0, 0.0, 0.5)).Phi
    b = loop_flux(f, wobbled_poloidal_loop(1.0, 0.0, 0.5, phi0=0.3, amplitude=0.3, k=2)).Phi
    assert abs(a - b) < 1e-8


def test_annulus(tok):
    f = annulus_flux(tok, toroidal_loop(1.5, 0.0), axis_loop(1.0))
    assert abs(abs(f.Phi) - np.pi / 4) < 1e-10
    assert abs(annulus_flux(tok, axis_loop(1.0), axis_loop(1.0)).Phi) == 0.0


def test_gauge_invariance(tok):
    # chi = sin(x) y + z^2 is single valued
    def grad_chi(x):
        return np.stack([np.cos(x[..., 0]) * x[..., 1], np.sin(x[..., 0]),
                         2 * x[..., 2]], axis=-1)
    shifted = AnalyticField(tok.B, A=lambda x: tok.A(x, check=False) + grad_chi(x),
                            domain=tok.in_domain)
    for loop in (poloidal_circle(1.0, 0.0, 0.5), toroidal_loop(1.5, 0.0),
                 wobbled_poloidal_loop(1.0, 0.0, 0.4)):
        assert abs(loop_flux(tok, loop).Phi - loop_flux(shifted, loop).Phi) < 1e-10


def test_flux_derivative_radial(tok):
    d = flux_derivative(tok, poloidal_circle(1.0, 0.0, 0.5), radial_homologue(1.0, 0.0))
    assert abs(abs(d.Phi) - DPHI_DR) < 1e-9


def test_flux_derivative_along_B_warns(tok):
    Y = lambda th, x: tok.B(x, check=False)
    with pytest.warns(DegenerateHomologueWarning):
        d = flux_derivative(tok, poloidal_circle(1.0, 0.0, 0.5), Y)
    assert abs(d.Phi) < 1e-12


def test_flux_derivative_vs_finite_difference(tok):
    h = 1e-4
    fd = (loop_flux(tok, poloidal_circle(1.0, 0.0, 0.5 + h)).Phi
          - loop_flux(tok, poloidal_circle(1.0, 0.0, 0.5 - h)).Phi) / (2 * h)
    d = flux_derivative(tok, poloidal_circle(1.0, 0.0, 0.5), radial_homologue(1.0, 0.0)).Phi
    assert abs(fd - d) < 1e-6


def test_poloidal_flux_per_psi(tok):
    # dPhi_pol / dpsi equals the u-line period 2 pi
    d = flux_derivative(tok, toroidal_loop(1.5, 0.0), grad_psi_homologue(tok))
    assert abs(abs(d.Phi) - 2 * np.pi) < 1e-6


def test_needs_vector_potential(tok):
    with pytest.raises(CapabilityError, match="flux_derivative"):
        loop_flux(AnalyticField(tok.B), poloidal_circle(1.0, 0.0, 0.5))


def test_open_loop_rejected():
    with pytest.raises(ValueError):
        LoopSpec(lambda th: np.stack([th, 0 * th, 0 * th], axis=-1))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 0.8))
def test_toroidal_flux_property(r):
    # closed form at any radius; the derivative route agrees too
    from fluxvol.field import make_tokamak_field
    f = make_tokamak_field()
    assert abs(loop_flux(f, poloidal_circle(1.0, 0.0, r)).abs - phi_tor(r)) < 1e-9
    d = flux_derivative(f, poloidal_circle(1.0, 0.0, r), radial_homologue(1.0, 0.0))
    assert abs(abs(d.Phi) - 2 * np.pi * r / np.sqrt(1 - r * r)) < 1e-8
