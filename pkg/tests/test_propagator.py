import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import simpson

from dispersive_lab.fields import (
    Field3, Gaussian, Potential, SmoothWell, gaussian_packet, make_grid, random_field, sample,
    zeros,
)
from dispersive_lab.propagator import (
    TRAJECTORY_COLUMNS, energy, evolve, free_evolve, heat_evolve, mass, observables, oscillate,
    perturbed, ramp, scale, static, translate,
)
from dispersive_lab.spectral import bound_states


@pytest.fixture(scope="module")
def g32():
    return make_grid(32, 8.0)


@pytest.fixture(scope="module")
def well(g32):
    return sample(SmoothWell(3.0, 1.5, 0.5), g32)


def _err(a, b):
    return (a - b).norm()


def test_free_identity(grid16, rng):
    f = random_field(grid16, rng)
    assert np.allclose(free_evolve(f, 0.0).values, f.values, atol=1e-14)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.floats(-20, 20))
def test_free_unitary(seed, t):
    g = make_grid(16, 4.0)
    f = random_field(g, np.random.default_rng(seed))
    assert abs(free_evolve(f, t).norm() - f.norm()) <= 1e-12 * f.norm()


def test_free_gaussian_sup_norm():
    g = make_grid(64, 16.0)
    f = gaussian_packet(g, 1.0)
    for t in (0.5, 1.0, 2.0, 3.0):
        sup = np.abs(free_evolve(f, t).values).max()
        assert sup == pytest.approx((1 + 4 * t * t) ** -0.75, abs=1e-4)


def test_evolve_without_potential_is_exact(g32):
    f = gaussian_packet(g32, 1.0, momentum=(1.0, 0.0, 0.0))
    tr = evolve(None, f, 1.0, 0.05, sample_dt=0.25)
    for t, s in zip(tr.times, tr.states):
        assert _err(s, free_evolve(f, t)) < 1e-12


def test_zero_potential_matches_free(g32):
    f = gaussian_packet(g32, 1.0)
    Vt = static(Potential(g32, np.zeros(g32.shape)))
    tr = evolve(Vt, f, 1.0, 0.1)
    assert _err(tr.final, free_evolve(f, 1.0)) < 1e-12


def test_strang_second_order(g32, well):
    f = gaussian_packet(g32, 1.0, center=(0.5, 0.0, 0.0))
    Vt = static(well)
    finals = [evolve(Vt, f, 1.0, dt).final for dt in (0.05, 0.025, 0.0125)]
    ratio = _err(finals[0], finals[1]) / _err(finals[1], finals[2])
    assert 3.5 <= ratio <= 4.5


def test_bound_state_keeps_its_phase(g32, well):
    spec = bound_states(well, k_max=1)
    phi = spec.eigenfields[0]
    tr = evolve(static(well), phi, 5.0, 0.01, sample_dt=0.5)
    for s in tr.states:
        assert abs(abs(phi.inner(s)) - 1) < 1e-4


def _duhamel_oracle(src, t_max, nodes=401):
    # psi(T) = -i int_0^T e^{i(T-s)|xi|^2} Psi(s) ds, Simpson in s
    s = np.linspace(0, t_max, nodes)
    vals = np.stack([free_evolve(src(si), t_max - si).values for si in s])
    return -1j * simpson(vals, x=s, axis=0)


def test_source_matches_duhamel(g32):
    bump = gaussian_packet(g32, 1.0)
    src = lambda t: bump * np.cos(2 * t)
    exact = _duhamel_oracle(src, 1.0)
    errs = [np.sqrt(g32.cell) * np.linalg.norm(evolve(None, zeros(g32), 1.0, dt, source=src).final.values - exact)
            for dt in (0.1, 0.05)]
    assert errs[1] < 1e-3
    assert 3.0 < errs[0] / errs[1] < 5.0


@settings(max_examples=10, deadline=None)
@given(family=st.sampled_from(["static", "translate", "scale", "ramp", "perturbed", "oscillate"]),
       seed=st.integers(0, 1000))
def test_mass_conservation_all_families(family, seed):
    g = make_grid(16, 4.0)
    rng = np.random.default_rng(seed)
    prof = SmoothWell(rng.uniform(0.5, 3.0), 1.0, 0.4)
    V0 = sample(prof, g)
    Vt = {
        "static": lambda: static(V0),
        "translate": lambda: translate(prof, g, rng.uniform(-1, 1, 3)),
        "scale": lambda: scale(prof, g, 0.2),
        "ramp": lambda: ramp(V0, 0.0, 2.0, 1.0),
        "perturbed": lambda: perturbed(V0, sample(Gaussian(1.0, 1.0), g), 0.3),
        "oscillate": lambda: oscillate(prof, g, (0.5, 0, 0), 2.0),
    }[family]()
    f = random_field(g, rng, band=3.0)
    tr = evolve(Vt, f, 1.0, 0.02)
    assert np.max(np.abs(tr.mass - tr.mass[0])) / tr.mass[0] <= 1e-10


def test_time_reversal(g32, well):
    f = gaussian_packet(g32, 1.0, momentum=(0.5, 0, 0))
    Vt = static(well)
    errs = []
    for dt in (0.1, 0.05):
        fwd = evolve(Vt, f, 1.0, dt).final
        back = evolve(Vt, Field3(g32, np.conj(fwd.values)), 1.0, dt).final
        errs.append(_err(Field3(g32, np.conj(back.values)), f))
    # Strang is symmetric, so reversal is exact up to rounding
    assert max(errs) < 1e-10


def test_stability_cap(g32):
    V = sample(SmoothWell(200.0, 1.0, 0.3), g32)
    with pytest.raises(ValueError):
        evolve(static(V), gaussian_packet(g32), 0.1, 0.01)


def test_rejects_incommensurate_horizon(g32):
    with pytest.raises(ValueError):
        evolve(None, gaussian_packet(g32), 1.0, 0.3)


def test_heat_gaussian_closed_form(g32):
    f = gaussian_packet(g32, 1.0)
    tr = heat_evolve(None, f, 0.5, 0.05, sample_dt=0.25)
    for t, s in zip(tr.times, tr.states):
        a = 1 + 2 * t
        exact = a ** -1.5 * np.exp(-g32.radius ** 2 / (2 * a))
        assert np.max(np.abs(s.values - exact)) < 1e-6
        var = np.sum(g32.coords[0] ** 2 * np.abs(s.values)) / np.sum(np.abs(s.values))
        assert var == pytest.approx(a, rel=1e-4)


def test_heat_dissipative(g32, rng):
    V = sample(Gaussian(2.0, 1.0), g32)
    tr = heat_evolve(static(V), random_field(g32, rng, band=2.0), 1.0, 0.05)
    assert np.all(np.diff(tr.mass) <= 0)


def test_heat_zero(g32):
    tr = heat_evolve(None, zeros(g32), 0.5, 0.1)
    assert np.all(tr.final.values == 0)


def test_observables_zero(g32):
    tr = evolve(None, zeros(g32), 0.2, 0.1)
    m, e = observables(tr)
    assert np.all(m == 0) and np.all(e == 0)


def test_free_energy_constant(g32):
    tr = evolve(None, gaussian_packet(g32, 1.0, momentum=(1.0, 0, 0)), 2.0, 0.05, sample_dt=0.5)
    assert np.ptp(tr.energy) < 1e-6 * tr.energy[0]


def test_energy_identity_for_moving_potential(g32):
    # dE/dt = int dV/dt |psi|^2
    Vt = translate(SmoothWell(2.0, 1.5, 0.5), g32, (0.5, 0.0, 0.0))
    tr = evolve(Vt, gaussian_packet(g32, 1.0), 1.0, 0.005)
    assert np.ptp(tr.energy) > 1e-3
    t = tr.times
    dE = np.gradient(tr.energy, t)
    rate = np.array([g32.cell * np.sum(Vt.derivative(s).values * np.abs(f.values) ** 2)
                     for s, f in zip(t, tr.states)])
    inner = slice(5, -5)
    assert np.max(np.abs(dE[inner] - rate[inner])) < 1e-2 * np.max(np.abs(rate))


def test_trajectory_csv(g32):
    tr = evolve(None, gaussian_packet(g32, 1.0), 0.2, 0.1)
    lines = tr.to_csv().splitlines()
    assert lines[0] == ",".join(TRAJECTORY_COLUMNS)
    assert len(lines) == 1 + len(tr)
    assert mass(tr.states[0]) == pytest.approx(float(lines[1].split(",")[1]))
    assert energy(tr.states[0], None) > 0
