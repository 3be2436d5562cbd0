import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from dispersive_lab.fields import (
    Field3, Gaussian, Potential, SmoothWell, ball, make_grid, random_field, sample, zeros,
)
from dispersive_lab.norms import rescale
from dispersive_lab.propagator import ramp, static, translate
from dispersive_lab.spectral import (
    apply_hamiltonian, birman_schwinger_spectrum, bound_states, eigen_count_timeline,
    empty_spectrum, project_bound, project_continuous, resonance_test, torus_threshold_energy,
)

THRESHOLD = np.pi ** 2 / 4
# ground state of the depth-8 unit square well, from k cot k = -kappa with k^2 + kappa^2 = 8
SQUARE_WELL_E0 = -3.01761


def _square_well_ground(depth):
    f = lambda kap: np.sqrt(depth - kap ** 2) / np.tan(np.sqrt(depth - kap ** 2)) + kap
    kap = brentq(f, 1e-9, np.sqrt(depth) - 1e-9)
    return -kap ** 2


def test_square_well_oracle_is_frozen():
    assert _square_well_ground(8.0) == pytest.approx(SQUARE_WELL_E0, abs=1e-5)


@pytest.fixture(scope="module")
def well8():
    return sample(ball(-8.0, 1.0), make_grid(64, 4.0), supersample=2)


@pytest.fixture(scope="module")
def spec8(well8):
    return bound_states(well8, k_max=2)


def test_hamiltonian_plane_wave(grid16):
    x, y, z = grid16.coords
    k = np.array([1, -2, 3]) * grid16.dk
    f = Field3(grid16, np.exp(1j * (k[0] * x + k[1] * y + k[2] * z)))
    V = Potential(grid16, np.zeros(grid16.shape))
    Hf = apply_hamiltonian(V, f)
    assert np.allclose(Hf.values, np.dot(k, k) * f.values, atol=1e-12)


def test_hamiltonian_zero(grid16):
    V = sample(Gaussian(-1.0, 1.0), grid16)
    assert np.all(apply_hamiltonian(V, zeros(grid16)).values == 0)


def test_hamiltonian_oscillator_core():
    g = make_grid(64, 8.0)
    V = Potential(g, g.radius ** 2)
    f = Field3(g, np.exp(-g.radius ** 2 / 2))
    Hf = apply_hamiltonian(V, f)
    core = g.radius < 2.0
    assert np.max(np.abs(Hf.values[core] - 3 * f.values[core])) < 1e-2


def test_hamiltonian_grid_mismatch(grid16, grid32):
    with pytest.raises(ValueError):
        apply_hamiltonian(Potential(grid32, np.zeros(grid32.shape)), zeros(grid16))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_hamiltonian_self_adjoint(seed):
    g = make_grid(16, 4.0)
    rng = np.random.default_rng(seed)
    V = sample(Gaussian(rng.uniform(-3, 3), rng.uniform(0.5, 2)), g)
    f, h = random_field(g, rng), random_field(g, rng)
    lhs = apply_hamiltonian(V, f).inner(h)
    rhs = f.inner(apply_hamiltonian(V, h))
    assert abs(lhs - rhs) <= 1e-8 * f.norm() * h.norm()


def test_free_has_no_bound_states(grid16):
    assert bound_states(Potential(grid16, np.zeros(grid16.shape))).count == 0


def test_square_well_ground_state(spec8):
    assert spec8.eigenvalues[0] == pytest.approx(SQUARE_WELL_E0, rel=1e-2)
    assert np.all(spec8.residuals <= 1e-6 * np.abs(spec8.eigenvalues))
    assert np.allclose(spec8.gram(), np.eye(spec8.count), atol=1e-8)


def test_shallow_well_unbound():
    V = sample(ball(-1.0, 1.0), make_grid(64, 16.0), supersample=2)
    assert bound_states(V, k_max=2).count == 0


def test_projection_examples(spec8, well8, rng):
    g = well8.grid
    f = random_field(g, rng, band=2.0)
    assert np.array_equal(project_continuous(empty_spectrum(g), f).values, f.values)
    phi = spec8.eigenfields[0]
    assert project_continuous(spec8, phi).norm() < 1e-8
    once = project_continuous(spec8, f)
    twice = project_continuous(spec8, once)
    assert (twice - once).norm() <= 1e-8 * f.norm()
    h = random_field(g, rng, band=2.0)
    assert abs(project_continuous(spec8, f).inner(h) - f.inner(project_continuous(spec8, h))) \
        <= 1e-8 * f.norm() * h.norm()
    assert (project_bound(spec8, f) + once - f).norm() <= 1e-10 * f.norm()


def test_resonance_free(grid16):
    rep = resonance_test(Potential(grid16, np.zeros(grid16.shape)))
    assert rep.verdict == "clear" and rep.margin == np.inf


@pytest.fixture(scope="module")
def bs_grid():
    return make_grid(32, 4.0)


def test_resonance_at_threshold(bs_grid):
    rep = resonance_test(sample(ball(-THRESHOLD, 1.0), bs_grid, supersample=2))
    assert rep.resonant and rep.distance_to_resonance < 0.05


def test_resonance_clear_unit_well(bs_grid):
    rep = resonance_test(sample(ball(-1.0, 1.0), bs_grid, supersample=2))
    assert rep.verdict == "clear" and rep.margin > 0.3
    assert rep.bs_eigenvalues[0] == pytest.approx(-1.0 / THRESHOLD, rel=2e-2)


def test_bs_spectrum_scaling_covariance(bs_grid):
    V = sample(SmoothWell(2.0, 1.0, 0.3), bs_grid)
    a = birman_schwinger_spectrum(V, k=4)
    for k in (-1, 1):
        b = birman_schwinger_spectrum(rescale(V, k), k=4)
        assert np.allclose(a, b, rtol=1e-3, atol=0)


def test_threshold_energy_scale():
    g = make_grid(64, 16.0)
    assert torus_threshold_energy(g) == pytest.approx(-0.095901 * (np.pi / 16) ** 2)


def test_count_timeline_static():
    g = make_grid(32, 8.0)
    V = sample(SmoothWell(4.0, 1.5, 0.3), g)
    tl = eigen_count_timeline(static(V), [0.0, 1.0, 2.0])
    assert len(set(tl.counts)) == 1 and tl.changes == []


def test_count_timeline_translation_constant():
    g = make_grid(32, 8.0)
    prof = SmoothWell(4.0, 1.5, 0.3)
    n0 = bound_states(sample(prof, g), delta_gap=-torus_threshold_energy(g)).count
    tl = eigen_count_timeline(translate(prof, g, (0.5, 0.0, 0.0)), [0.0, 1.0, 2.0])
    assert n0 >= 1 and np.all(tl.counts == n0)


def test_count_timeline_rejects_unsorted():
    g = make_grid(16, 4.0)
    with pytest.raises(ValueError):
        eigen_count_timeline(static(sample(Gaussian(-1.0, 1.0), g)), [1.0, 0.0])


def test_count_timeline_csv():
    g = make_grid(16, 4.0)
    tl = eigen_count_timeline(static(Potential(g, np.zeros(g.shape))), [0.0, 0.5])
    assert tl.to_csv().splitlines() == ["t,count", "0.0,0", "0.5,0"]
