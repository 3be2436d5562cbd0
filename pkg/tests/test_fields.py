import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dispersive_lab.fields import (
    FREQUENCY, Field3, Gaussian, Potential, ShellIndicator, SmoothWell, direct_transform,
    fourier, frequency_line, gaussian_packet, inverse_fourier, make_grid, random_field,
    sample, sphere_quadrature, zeros,
)


@pytest.mark.parametrize("n, L, h", [(8, 1.0, 0.25), (64, 16.0, 0.5)])
def test_grid_spacing(n, L, h):
    g = make_grid(n, L)
    assert g.h == h
    assert g.axis[0] == -L and g.axis[-1] == pytest.approx(L - h)


@pytest.mark.parametrize("n, L", [(10, 1.0), (4, 1.0), (16, 0.0), (16, -2.0)])
def test_grid_rejects_bad_input(n, L):
    with pytest.raises(ValueError):
        make_grid(n, L)


def test_zero_transform(grid16):
    assert np.all(fourier(zeros(grid16)).values == 0)


def test_gaussian_transform_matches_closed_form():
    g = make_grid(64, 16.0)
    fh = fourier(gaussian_packet(g, 1.0))
    xi2 = g.xi2
    assert np.max(np.abs(fh.values - np.exp(-xi2 / 2))) < 1e-6
    assert fh.side == FREQUENCY


def test_round_trip(grid16, rng):
    f = random_field(grid16, rng)
    back = inverse_fourier(fourier(f))
    assert np.linalg.norm(back.values - f.values) <= 1e-12 * np.linalg.norm(f.values)


def test_side_mismatch_raises(grid16):
    f = zeros(grid16)
    with pytest.raises(ValueError):
        inverse_fourier(f)
    with pytest.raises(ValueError):
        fourier(fourier(f))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), band=st.one_of(st.none(), st.floats(0.5, 6.0)))
def test_plancherel(seed, band):
    g = make_grid(16, 4.0)
    f = random_field(g, np.random.default_rng(seed), band=band)
    assert abs(f.norm() - fourier(f).norm()) <= 1e-10 * f.norm()


def test_field_rejects_wrong_shape(grid16):
    with pytest.raises(ValueError):
        Field3(grid16, np.zeros((4, 4, 4)))
    with pytest.raises(ValueError):
        Potential(grid16, np.full(grid16.shape, np.nan))


def test_sphere_quadrature_moments():
    q = sphere_quadrature(8)
    z = q.directions[:, 2]
    assert q.integrate(np.ones(len(q))) == pytest.approx(4 * np.pi, rel=1e-10)
    assert q.integrate(z ** 2) == pytest.approx(4 * np.pi / 3, rel=1e-12)
    assert abs(q.integrate(z)) < 1e-13


def test_sphere_quadrature_rejects_low_order():
    with pytest.raises(ValueError):
        sphere_quadrature(5)


@settings(max_examples=30, deadline=None)
@given(order=st.integers(6, 16), a=st.integers(0, 8), b=st.integers(0, 8), c=st.integers(0, 8))
def test_sphere_quadrature_exact_on_monomials(order, a, b, c):
    # int_{S^2} x^a y^b z^c vanishes unless all exponents are even; then it is
    # 2 Gamma((a+1)/2) Gamma((b+1)/2) Gamma((c+1)/2) / Gamma((a+b+c+3)/2).
    from math import gamma
    q = sphere_quadrature(order)
    if a + b + c > order - 1:
        return
    d = q.directions
    got = q.integrate(d[:, 0] ** a * d[:, 1] ** b * d[:, 2] ** c)
    if a % 2 or b % 2 or c % 2:
        exact = 0.0
    else:
        exact = 2 * gamma((a + 1) / 2) * gamma((b + 1) / 2) * gamma((c + 1) / 2) / gamma((a + b + c + 3) / 2)
    assert got == pytest.approx(exact, abs=1e-8)


def test_frequency_line_zero(grid16):
    V = Potential(grid16, np.zeros(grid16.shape))
    assert np.all(frequency_line(V, (0, 0, 1.0), np.linspace(0, 2, 5)) == 0)


def test_frequency_line_radial_gaussian():
    g = make_grid(64, 16.0)
    V = sample(Gaussian(1.0, 1.0), g)
    s = np.linspace(0, 3, 13)
    a = frequency_line(V, (0, 0, 1.0), s)
    b = frequency_line(V, np.array([1.0, 1.0, 1.0]) / np.sqrt(3), s)
    assert np.max(np.abs(a - b)) < 1e-6 * np.max(np.abs(a))


def test_frequency_line_shell_matches_direct(rng):
    g = make_grid(32, 4.0)
    V = sample(ShellIndicator(1.0, 1.0, 2.0), g)
    for _ in range(8):
        om = rng.standard_normal(3)
        om /= np.linalg.norm(om)
        s = rng.uniform(0, 0.5 * g.nyquist, 1)
        a = frequency_line(V, om, s)
        b = frequency_line(V, om, s, method="direct")
        assert abs(a[0] - b[0]) <= 1e-3 * abs(direct_transform(V, np.zeros((1, 3)))[0])


def test_frequency_line_smooth_relative(rng):
    g = make_grid(32, 8.0)
    V = sample(SmoothWell(1.0, 2.0, 0.5), g)
    om = np.array([0.3, -0.4, 0.866])
    om /= np.linalg.norm(om)
    s = np.linspace(0, 2.0, 9)
    a = frequency_line(V, om, s)
    b = frequency_line(V, om, s, method="direct")
    assert np.max(np.abs(a - b)) <= 1e-3 * np.max(np.abs(b))


def test_frequency_line_rejects_out_of_band(grid16):
    V = sample(Gaussian(1.0, 1.0), grid16)
    with pytest.raises(ValueError):
        frequency_line(V, (0, 0, 1.0), [2 * grid16.nyquist])
    with pytest.raises(ValueError):
        frequency_line(V, (0, 0, 2.0), [0.1])
