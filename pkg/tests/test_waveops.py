import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dispersive_lab.fields import (
    Gaussian, Potential, ShellIndicator, SmoothWell, ball, gaussian_packet, make_grid,
    random_field, sample, sphere_quadrature, zeros,
)
from dispersive_lab.norms import dyadic_shell_norm, rescale
from dispersive_lab.propagator import free_evolve
from dispersive_lab.spectral import apply_hamiltonian, bound_states
from dispersive_lab.waveops import (
    UnderResolved, besov_1d, born_series, born_w1, calibrate_time_convention, decomposition_check,
    dt_kernel_bound, dyadic_x_samples, dynamic_wave_operator, estim_ratio, eta_extrapolate,
    halfspace_truncate, hardy_ratio, intertwining_residual, kernel_K, profile_L,
    wave_operator_at, weighted_decay_check,
)


@pytest.fixture(scope="module")
def g32():
    return make_grid(32, 8.0)


@pytest.fixture(scope="module")
def gauss(g32):
    return sample(Gaussian(-1.0, 1.0), g32)


@pytest.fixture(scope="module")
def packet(g32):
    return gaussian_packet(g32, 1.5, momentum=(1.5, 1.5, 1.5), normalize=True)


def _zero(g):
    return Potential(g, np.zeros(g.shape))


# -- dynamic wave operators ---------------------------------------------------

def test_dynamic_free_is_identity(g32, packet):
    r = dynamic_wave_operator(_zero(g32), packet, T_max=4.0, checkpoints=[1, 2])
    assert (r.value - packet).norm() < 1e-12


def test_dynamic_isometry_and_inverse(g32, packet):
    V = sample(ball(-1.0, 1.0), g32, supersample=2)
    kw = dict(checkpoints=[1, 2, 4], tol=1e-2, dt=0.01)
    W = dynamic_wave_operator(V, packet, **kw)
    assert W.converged
    assert abs(W.value.norm() - 1) < 1e-3
    back = dynamic_wave_operator(V, W.value, adjoint=True, **kw)
    assert (back.value - packet).norm() < 2e-2


def test_dynamic_reports_non_convergence(g32):
    f = gaussian_packet(g32, 1.0, normalize=True)
    V = sample(Gaussian(-2.0, 1.0), g32)
    r = dynamic_wave_operator(V, f, checkpoints=[1, 2], tol=1e-8, dt=0.01, check_resonance=False)
    assert not r.converged and r.last_increment > 0


def test_wave_operator_at_matches_definition(g32, packet):
    from dispersive_lab.propagator import evolve, static
    V = sample(Gaussian(-1.0, 1.0), g32)
    ref = evolve(static(V), free_evolve(packet, -1.0), 1.0, 0.01).final
    got = wave_operator_at(V, packet, 1.0, dt=0.01)
    assert (got - ref).norm() < 1e-10


def test_intertwining_free(g32, packet):
    assert intertwining_residual(_zero(g32), packet, lambda f: f) < 1e-12


def _adjoint_residual(n, L, T, dt=0.01):
    g = make_grid(n, L)
    V = sample(SmoothWell(1.0, 1.5, 0.5), g)
    f = gaussian_packet(g, 1.5, momentum=(1.5, 1.5, 1.5), normalize=True)
    return intertwining_residual(V, f, lambda u: wave_operator_at(V, u, T, dt=dt, adjoint=True))


def test_intertwining_shrinks_with_limit_time():
    assert _adjoint_residual(32, 16.0, 2.0) < 0.5 * _adjoint_residual(32, 16.0, 1.0)


def test_intertwining_stable_under_refinement():
    # the identity is exact on each grid, so refinement must not make it worse
    a, b = _adjoint_residual(32, 8.0, 1.0), _adjoint_residual(64, 8.0, 1.0)
    assert b <= 1.01 * a


def test_intertwining_projects_bound_states(g32, packet):
    V = sample(SmoothWell(4.0, 1.5, 0.3), g32)
    spec = bound_states(V, k_max=1)
    phi = spec.eigenfields[0]
    out = wave_operator_at(V, phi, 1.0, dt=0.01, adjoint=True, spectrum=spec)
    assert out.norm() < 1e-8
    W = lambda u: wave_operator_at(V, u, 1.0, dt=0.01, adjoint=True, spectrum=spec)
    from dispersive_lab.spectral import project_continuous
    mixed = phi + packet
    assert intertwining_residual(V, mixed, W, spectrum=spec) == pytest.approx(
        intertwining_residual(V, project_continuous(spec, mixed), W), rel=1e-10)


# -- Born series ----------------------------------------------------------------

def test_born_w1_free(g32, packet):
    assert born_w1(_zero(g32), packet, 0.1).norm() == 0


def test_born_w1_rejects_eta(g32, packet, gauss):
    with pytest.raises(ValueError):
        born_w1(gauss, packet, 0.0)


def test_born_w1_time_and_frequency_agree(g32):
    V = sample(Gaussian(-0.3, 1.0), g32)
    f = gaussian_packet(g32, 1.0, normalize=True)
    a = born_w1(V, f, 0.5)
    b = born_w1(V, f, 0.5, method="time")
    assert (a - b).norm() < 1e-3 * a.norm()


@settings(max_examples=5, deadline=None)
@given(eps=st.floats(0.01, 3.0))
def test_born_w1_linear_in_potential(eps):
    g = make_grid(16, 4.0)
    V = sample(Gaussian(-0.5, 1.0), g)
    f = gaussian_packet(g, 1.0)
    a = born_w1(V, f, 0.3)
    b = born_w1(V * eps, f, 0.3)
    assert (b - a * eps).norm() <= 1e-10 * max(b.norm(), 1e-300)


def test_born_series_free(g32, packet):
    s = born_series(_zero(g32), packet, order=2)
    assert np.all(s.diagnostics.norms == 0)
    assert (s.value - packet).norm() == 0


def test_born_series_geometric(g32):
    V = sample(ball(-0.2, 1.0), g32, supersample=2)
    f = gaussian_packet(g32, 1.0, normalize=True)
    d = born_series(V, f, order=4, eta=0.3).diagnostics
    assert d.converging
    assert np.ptp(d.ratios) < 0.5 * np.mean(d.ratios)


def test_born_second_order_improves(g32, packet):
    V = sample(ball(-0.2, 1.0), g32, supersample=2)
    s = born_series(V, packet, order=2, method="time", T=2.0, dt=0.01)
    W = wave_operator_at(V, packet, 2.0, dt=0.01)
    assert (s.partial(2) - W).norm() < (s.partial(1) - W).norm()


def test_eta_extrapolate_linear():
    assert eta_extrapolate([2 + 0.1, 2 + 0.03, 2 + 0.01]) == pytest.approx(2.0)


# -- L profiles and the estim constant -----------------------------------------

@pytest.fixture(scope="module")
def dirs():
    return sphere_quadrature(8)


def test_profile_zero(g32, dirs):
    p = profile_L(_zero(g32), dirs)
    assert p.total == 0


def test_profile_radial_independent_of_direction(gauss, dirs):
    p = profile_L(gauss, dirs)
    per = p.per_direction[:, 0]
    assert np.ptp(per) <= 1e-3 * per.mean()
    assert p.error_estimate < 1e-2


def test_estim_shell_and_rescale():
    g = make_grid(32, 8.0)
    V = sample(SmoothWell(1.0, 2.0, 0.5), g, supersample=2)
    r0 = estim_ratio(V)
    assert np.isfinite(r0.ratio) and r0.ratio > 0
    r1 = estim_ratio(rescale(V, 1))
    assert r1.ratio == pytest.approx(r0.ratio, rel=2e-2)


def test_estim_rejects_zero(g32):
    with pytest.raises(ValueError):
        estim_ratio(_zero(g32))


# -- kernel K and its decomposition ---------------------------------------------

def test_kernel_zero(g32):
    assert kernel_K(_zero(g32), (0.5, 0, 0), 1.0, (0, 0, 1.0)) == 0


def test_kernel_rotation_symmetry(gauss, rng):
    om = np.array([0.0, 0.0, 1.0])
    x = np.array([0.3, 0.4, 0.7])
    a = kernel_K(gauss, x, 1.5, om)
    # rotate both x and omega about e1 and e2: (x.w, |x|, t) unchanged
    from scipy.spatial.transform import Rotation
    for _ in range(3):
        R = Rotation.random(random_state=rng.integers(1 << 30)).as_matrix()
        b = kernel_K(gauss, R @ x, 1.5, R @ om)
        assert abs(b - a) <= 1e-3 * abs(a)


def test_calibrated_time_scale():
    c = calibrate_time_convention(samples=20)
    assert c.time_scale == pytest.approx(0.5, abs=1e-3)


def test_decomposition_gaussian(gauss):
    rep = decomposition_check(gauss, samples=100, time_scale=0.5)
    assert rep.max_deviation < 1e-2


# -- integration by parts, Hardy, weighted decay -------------------------------

def test_dt_kernel_zero(g32):
    assert dt_kernel_bound(_zero(g32)).value == 0


def test_dt_kernel_gaussian(gauss):
    r = dt_kernel_bound(gauss, samples=20)
    assert np.isfinite(r.value) and r.value > 0


def test_hardy_profile_finite_and_scale_invariant():
    r1 = hardy_ratio(lambda s: s * np.exp(-s * s))
    r2 = hardy_ratio(lambda s: 2 * s * np.exp(-4 * s * s))
    assert np.isfinite(r1.ratio) and r1.ratio > 0
    assert r2.ratio == pytest.approx(r1.ratio, rel=1e-3)


def test_hardy_mean_free_shell(g32, dirs):
    r = hardy_ratio(sample(ShellIndicator(1.0, 1.0, 2.0), g32), dirs=dirs)
    assert np.isfinite(r.ratio) and r.ratio > 0


def test_besov_1d_homogeneous():
    s = np.arange(2000) * 0.01
    h = np.exp(-s ** 2)
    assert besov_1d(3 * h, 0.01) == pytest.approx(3 * besov_1d(h, 0.01), rel=1e-12)


def test_weighted_decay_finite(gauss, dirs):
    xs = dyadic_x_samples(range(-1, 3))
    for eps in (0.5, 1.0):
        t = weighted_decay_check(gauss, eps, xs, dirs=dirs)
        assert t.finite
        assert "ratio" in t.to_csv()


def test_halfspace_examples(gauss):
    L = gauss.grid.L
    om = (0.0, 0.6, 0.8)
    assert np.array_equal(halfspace_truncate(gauss, om, -2 * L).values, gauss.values)
    assert halfspace_truncate(gauss, om, 2 * L).is_zero()
    T = halfspace_truncate(gauss, om, 0.2)
    assert dyadic_shell_norm(T, 0.5).value <= dyadic_shell_norm(gauss, 0.5).value
