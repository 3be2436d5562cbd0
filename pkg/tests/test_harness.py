import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dispersive_lab.fields import gaussian_packet, make_grid
from dispersive_lab.harness import (
    CHECKS, SUMMARY_COLUMNS, ContinuousProjector, Scenario, ScenarioError, WindowTooShort,
    decay_fit, half_derivative, parse_scenario, random_source, retarded_duhamel,
    retarded_strichartz_check, run_scenario, smoothing_ratio, strichartz_ratio,
)
from dispersive_lab.propagator import free_evolve

SMALL = dict(n=16, L=4.0, dt=0.01, t_max=0.5, sample_dt=0.1)


# -- scenario files -------------------------------------------------------------

def test_parse_full_file():
    sc = parse_scenario("""
        # comment
        potential.family = translate
        potential.depth = 0.8   # inline
        potential.radius = 1.2
        modulation.speed = 0.3
        modulation.ramp = 2.0
        grid.n = 32
        grid.L = 8
        time.dt = 0.01
        time.max = 1.0
        params.epsilon = 0.25
        params.p = 1.5
        checks = trajectory, strichartz
    """)
    assert (sc.family, sc.depth, sc.radius, sc.speed, sc.ramp) == ("translate", 0.8, 1.2, 0.3, 2.0)
    assert (sc.n, sc.L, sc.dt, sc.t_max, sc.epsilon, sc.p) == (32, 8.0, 0.01, 1.0, 0.25, 1.5)
    assert sc.checks == ("trajectory", "strichartz")


@pytest.mark.parametrize("text, key", [
    ("grid.nn = 32", "grid.nn"),
    ("grid.n = 30", "grid.n"),
    ("grid.n = abc", "grid.n"),
    ("time.dt = -1", "time.dt"),
    ("time.max = 0.0123", "time.max"),
    ("potential.family = wobble", "potential.family"),
    ("checks = decay, nonsense", "checks"),
    ("params.p = 2", "params.p"),
    ("params.epsilon = 0", "params.epsilon"),
    ("grid.L = 8\ngrid.L = 4", "grid.L"),
    ("just words", "just"),
])
def test_malformed_key_named(text, key):
    with pytest.raises(ScenarioError) as err:
        parse_scenario(text)
    assert err.value.key == key
    assert key in str(err.value)


def test_empty_check_list_gives_empty_report():
    rep = run_scenario(parse_scenario("checks ="))
    assert len(rep) == 0
    assert rep.summary_csv().strip() == ",".join(SUMMARY_COLUMNS)


def test_every_family_builds():
    for fam in ("free", "static", "translate", "scale", "ramp", "perturbed"):
        sc = Scenario(family=fam, speed=0.2, **SMALL)
        Vt = sc.time_potential()
        assert (Vt is None) == (fam == "free")
        if Vt is not None:
            assert Vt(0.3).grid == sc.grid


def test_initial_state_normalized():
    assert Scenario(**SMALL).initial_state().norm() == pytest.approx(1.0)


# -- continuous projector ---------------------------------------------------------

def test_projector_free_is_identity():
    P = ContinuousProjector(None, 1.0, 0.1)
    f = gaussian_packet(make_grid(16, 4.0))
    assert P.continuous(0.5, f) is f or np.array_equal(P.continuous(0.5, f).values, f.values)


def test_projector_removes_bound_state():
    sc = Scenario(family="static", depth=4.0, n=32, L=8.0, dt=0.01, t_max=0.5)
    P = ContinuousProjector(sc.time_potential(), sc.t_max, 0.1)
    spec = P.spectrum_at(0.0)
    assert spec.count >= 1
    assert P.continuous(0.2, spec.eigenfields[0]).norm() < 1e-8


# -- Strichartz, decay, smoothing -------------------------------------------------

def test_strichartz_free_finite():
    r = strichartz_ratio(Scenario(**SMALL))
    assert np.isfinite(r.ratio) and r.ratio > 0


@settings(max_examples=5, deadline=None)
@given(c=st.floats(0.1, 10.0))
def test_strichartz_homogeneous(c):
    sc = Scenario(family="static", depth=0.5, **SMALL)
    P = ContinuousProjector(sc.time_potential(), sc.t_max, 0.1)
    a = strichartz_ratio(sc, check=False, refine=False, projector=P)
    psi = sc.initial_state() * c
    b = strichartz_ratio(sc.with_overrides(psi0=psi), check=False, refine=False, projector=P)
    assert b.ratio == pytest.approx(a.ratio, rel=1e-12)


def test_decay_fit_short_window_raises():
    with pytest.raises(WindowTooShort):
        decay_fit(Scenario(**SMALL))


def test_decay_fit_free_small_grid():
    sc = Scenario(n=128, L=32.0, dt=0.05, t_max=6.0, width=0.7)
    fit = decay_fit(sc, t_start=1.0)
    assert fit.window[1] > 3.16
    assert -1.6 < fit.slope < -1.4


def test_half_derivative_of_plane_wave():
    g = make_grid(16, 4.0)
    x = g.coords[0]
    k = 2 * g.dk
    from dispersive_lab.fields import Field3
    wave = Field3(g, np.broadcast_to(np.exp(1j * k * x), g.shape))
    assert np.allclose(half_derivative(wave).values, np.sqrt(k) * wave.values, atol=1e-12)


def test_smoothing_free_finite():
    r = smoothing_ratio(Scenario(n=32, L=8.0, dt=0.02, t_max=1.0))
    assert np.isfinite(r.ratio) and r.ratio > 0


# -- retarded Strichartz -----------------------------------------------------------

def test_retarded_duhamel_constant_source():
    g = make_grid(16, 4.0)
    f = gaussian_packet(g, 1.0)
    times = np.linspace(0, 1, 201)
    u = retarded_duhamel([f] * len(times), times)
    # oracle: int_0^1 of the free flow of f over time 1 - s
    s = np.linspace(0, 1, 2001)
    ref = np.trapezoid(np.stack([free_evolve(f, 1 - si).values for si in s]), s, axis=0)
    assert np.linalg.norm(u[-1].values - ref) < 1e-4 * np.linalg.norm(ref)
    assert u[0].norm() == 0


@settings(max_examples=5, deadline=None)
@given(shift=st.floats(-50, 50), seed=st.integers(0, 100))
def test_retarded_time_translation_invariant(shift, seed):
    g = make_grid(16, 4.0)
    times = np.linspace(0, 2, 21)
    F = random_source(g, np.random.default_rng(seed), times)
    a = retarded_strichartz_check(F, times, (1, 0, 0), (0, 0, 1))
    b = retarded_strichartz_check(F, times + shift, (1, 0, 0), (0, 0, 1))
    assert b.ratio == pytest.approx(a.ratio, rel=1e-9)


def test_retarded_zero_source():
    g = make_grid(16, 4.0)
    times = np.linspace(0, 1, 5)
    F = [gaussian_packet(g) * 0.0 for _ in times]
    assert retarded_strichartz_check(F, times, (0, 0, 1), (0, 0, 1)).ratio == 0


# -- scenario runner --------------------------------------------------------------

def test_run_cheap_checks_and_write(tmp_path):
    sc = Scenario(family="static", depth=0.5, checks=("trajectory", "hypotheses", "resonance"),
                  n=16, L=4.0, dt=0.01, t_max=0.2)
    rep = run_scenario(sc)
    assert [r.check for r in rep.results] == list(sc.checks)
    paths = rep.write(str(tmp_path))
    rows = list(csv.DictReader(io.StringIO((tmp_path / "summary.csv").read_text())))
    assert [r["check"] for r in rows] == list(sc.checks)
    assert list(rows[0].keys()) == list(SUMMARY_COLUMNS)
    assert (tmp_path / "trajectory.csv").exists()
    assert all(r["status"] in ("pass", "fail", "inconclusive", "error") for r in rows)
    assert str(tmp_path / "summary.csv") in paths


def test_failing_check_is_isolated():
    # the transformed check cannot reach its limit on this tiny box
    sc = Scenario(family="static", depth=0.5, checks=("transformed", "trajectory"), **SMALL)
    rep = run_scenario(sc)
    assert rep["trajectory"].status != "error"
    assert set(rep.statuses) == {"transformed", "trajectory"}


def test_check_names_are_stable():
    assert CHECKS == ("trajectory", "hypotheses", "strichartz", "decay", "smoothing",
                      "transformed", "retarded", "resonance", "count", "estim")
