"""Scenario runner: measured Strichartz, decay, smoothing and transformed-equation
checks on modulated potentials, with CSV reports.

A :class:`Scenario` is a flat configuration (potential family, grid, time
horizon, parameters, checks).  :func:`run_scenario` executes the configured
checks in isolation from each other and collects a :class:`Report`; each
check yields a value, a refinement error estimate and a status.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import warnings
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .fields import (Field3, Gaussian, Potential, SmoothWell, fftn, gaussian_packet, ifftn,
                     make_grid, sample)
from .norms import (anisotropic_weight_norm, directional_norm, dyadic_shell_norm, lorentz_norm,
                    rate_norm, reports_to_csv)
from .propagator import (TimePotential, boundary_ratio, evolve, free_evolve, free_evolve_many,
                         perturbed, ramp, scale, static, translate)
from .spectral import (FreeGreen, SpectralData, apply_hamiltonian, bound_states, eigen_count_timeline,
                       empty_spectrum, project_bound, resonance_test, torus_threshold_energy)
from .waveops import dynamic_wave_operator, estim_ratio, profile_L, wave_operator_at

log = logging.getLogger(__name__)

WELL_EDGE = 0.3
INCONCLUSIVE_FRACTION = 0.1

FAMILIES = ("free", "static", "translate", "scale", "ramp", "perturbed")
CHECKS = ("trajectory", "hypotheses", "strichartz", "decay", "smoothing", "transformed",
          "retarded", "resonance", "count", "estim")
SUMMARY_COLUMNS = ("check", "value", "error_estimate", "status")

# scenario-file key -> Scenario attribute
SCENARIO_KEYS = {
    "potential.family": "family",
    "potential.depth": "depth",
    "potential.radius": "radius",
    "modulation.speed": "speed",
    "modulation.ramp": "ramp",
    "grid.n": "n",
    "grid.L": "L",
    "time.dt": "dt",
    "time.max": "t_max",
    "params.epsilon": "epsilon",
    "params.p": "p",
    "initial.width": "width",
    "checks": "checks",
}
_KEY_OF = {v: k for k, v in SCENARIO_KEYS.items()}


class ScenarioError(ValueError):
    """Invalid scenario configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str, line: int | None = None):
        self.key = key
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{key}: {message}")


class WindowTooShort(ValueError):
    pass


# --------------------------------------------------------------------------
# scenarios


@dataclass
class Scenario:
    """Runnable configuration of a modulated potential and initial data.

    Families build on a smooth well of ``depth`` and ``radius``:

    - ``free``: ``V = 0``;
    - ``static``: the well itself;
    - ``translate``: the well moving along ``e3`` at ``speed``;
    - ``scale``: ``alpha^2 V0(alpha x)`` with ``alpha = 1 + speed t``;
    - ``ramp``: amplitude rising linearly from 0 to ``ramp``, then held; the
      rise takes ``ramp / speed`` time units when ``speed > 0`` and the first
      half of the run otherwise;
    - ``perturbed``: the well plus ``speed cos(t)`` times a unit Gaussian bump.

    ``psi0`` and ``source`` are programmatic only; by default the initial
    state is a normalized Gaussian of width ``width`` at the origin and there
    is no source.
    """

    family: str = "free"
    depth: float = 0.5
    radius: float = 1.5
    speed: float = 0.0
    ramp: float = 1.0
    n: int = 64
    L: float = 16.0
    dt: float = 5e-3
    t_max: float = 4.0
    epsilon: float = 0.5
    p: float = 1.0
    width: float = 1.0
    checks: tuple = ()
    seed: int = 0
    sample_dt: float = 0.05
    projector_every: int = 10
    psi0: Optional[Field3] = field(default=None, repr=False)
    source: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self):
        self.checks = tuple(self.checks)
        self.validate()

    def validate(self) -> None:
        def bad(attr, msg):
            raise ScenarioError(_KEY_OF.get(attr, attr), msg)

        if self.family not in FAMILIES:
            bad("family", f"unknown family {self.family!r}; expected one of {', '.join(FAMILIES)}")
        n = self.n
        if not isinstance(n, (int, np.integer)) or n < 8 or n & (n - 1):
            bad("n", f"must be a power of two >= 8, got {n!r}")
        for attr in ("L", "dt", "t_max", "radius", "width", "sample_dt"):
            v = getattr(self, attr)
            if not (math.isfinite(v) and v > 0):
                bad(attr, f"must be positive and finite, got {v!r}")
        for attr in ("depth", "speed", "ramp"):
            v = getattr(self, attr)
            if not math.isfinite(v):
                bad(attr, f"must be finite, got {v!r}")
        if self.depth < 0:
            bad("depth", "must be non-negative (the well is -depth inside the radius)")
        steps = self.t_max / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            bad("t_max", f"must be a multiple of time.dt = {self.dt}")
        if not 0 < self.epsilon <= 1:
            bad("epsilon", f"must lie in (0, 1], got {self.epsilon}")
        if not 1 <= self.p < 2:
            bad("p", f"must lie in [1, 2), got {self.p}")
        unknown = [c for c in self.checks if c not in CHECKS]
        if unknown:
            bad("checks", f"unknown check(s) {', '.join(unknown)}; expected from {', '.join(CHECKS)}")
        if self.projector_every < 1:
            bad("projector_every", "must be >= 1")
        if self.psi0 is not None and self.psi0.grid != self.grid:
            bad("psi0", "initial state lives on a different grid")

    @property
    def grid(self):
        return make_grid(int(self.n), float(self.L))

    def profile(self) -> SmoothWell:
        return SmoothWell(self.depth, self.radius, WELL_EDGE)

    def time_potential(self) -> TimePotential | None:
        g, prof = self.grid, self.profile()
        if self.family == "free":
            return None
        if self.family == "static":
            return static(sample(prof, g, supersample=2, label="well"))
        if self.family == "translate":
            return translate(prof, g, (0.0, 0.0, self.speed))
        if self.family == "scale":
            return scale(prof, g, self.speed)
        if self.family == "ramp":
            V0 = sample(prof, g, supersample=2, label="well")
            duration = abs(self.ramp) / self.speed if self.speed > 0 else 0.5 * self.t_max
            return ramp(V0, 0.0, self.ramp, max(duration, self.dt))
        W = sample(Gaussian(1.0, 1.0), g, supersample=2, label="bump")
        return perturbed(sample(prof, g, supersample=2, label="well"), W, self.speed)

    def initial_state(self) -> Field3:
        if self.psi0 is not None:
            return self.psi0
        return gaussian_packet(self.grid, self.width, normalize=True)

    def with_overrides(self, **kw) -> "Scenario":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)

    def free_reference(self) -> "Scenario":
        return replace(self, family="free")


def _convert(key: str, attr: str, raw: str, line: int | None):
    raw = raw.strip()
    if attr == "checks":
        return tuple(c.strip() for c in raw.split(",") if c.strip())
    if attr == "family":
        if not raw:
            raise ScenarioError(key, "empty value", line)
        return raw
    try:
        if attr == "n":
            return int(raw)
        return float(raw)
    except ValueError:
        kind = "an integer" if attr == "n" else "a number"
        raise ScenarioError(key, f"expected {kind}, got {raw!r}", line) from None


def parse_scenario(text: str) -> Scenario:
    """Parse flat ``key = value`` text; ``#`` starts a comment."""
    values, seen = {}, {}
    for i, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ScenarioError(s.split()[0], "expected 'key = value'", i)
        key, raw = (p.strip() for p in s.split("=", 1))
        if key not in SCENARIO_KEYS:
            raise ScenarioError(key, "unknown key", i)
        if key in seen:
            raise ScenarioError(key, f"duplicate key (first set on line {seen[key]})", i)
        seen[key] = i
        attr = SCENARIO_KEYS[key]
        values[attr] = _convert(key, attr, raw, i)
    return Scenario(**values)


def load_scenario(path: str) -> Scenario:
    with open(path) as fh:
        return parse_scenario(fh.read())


# --------------------------------------------------------------------------
# shared machinery


class ContinuousProjector:
    """``P_c(t)`` from bound states recomputed on knots, interpolated linearly in between.

    The bound-state action ``P_p(t) f`` is the linear interpolation of
    ``P_p(t_a) f`` and ``P_p(t_b) f`` for the surrounding knots.
    """

    def __init__(self, Vt, t_max: float, every: float, k_max: int = 2, tol: float = 1e-6):
        self.Vt = Vt
        if Vt is None:
            self.knots = np.array([0.0])
            self.spectra = [None]
            return
        m = max(1, int(math.ceil(t_max / every - 1e-9)))
        self.knots = np.linspace(0.0, t_max, m + 1) if not Vt.is_static else np.array([0.0])
        self.spectra, prev = [], None
        for t in self.knots:
            V = Vt(t)
            gap = -torus_threshold_energy(V.grid)
            x0 = prev.eigenfields if prev is not None and prev.count else None
            spec = bound_states(V, k_max=k_max, guard=1, delta_gap=gap, tol=tol, x0=x0)
            self.spectra.append(spec)
            prev = spec

    @property
    def counts(self) -> np.ndarray:
        return np.array([0 if s is None else s.count for s in self.spectra])

    def bound_part(self, t: float, f: Field3) -> Field3:
        if self.Vt is None or len(self.knots) == 1:
            s = self.spectra[0]
            return f * 0.0 if s is None else project_bound(s, f)
        k = self.knots
        i = int(np.clip(np.searchsorted(k, t, side="right") - 1, 0, len(k) - 2))
        th = float(np.clip((t - k[i]) / (k[i + 1] - k[i]), 0.0, 1.0))
        return project_bound(self.spectra[i], f) * (1 - th) + project_bound(self.spectra[i + 1], f) * th

    def continuous(self, t: float, f: Field3) -> Field3:
        return f - self.bound_part(t, f)

    def spectrum_at(self, t: float) -> SpectralData:
        if self.Vt is None:
            return empty_spectrum(None)
        i = int(np.argmin(np.abs(self.knots - t)))
        return self.spectra[i]


def _trajectory(sc: Scenario, Vt, dt: float | None = None):
    """Sampled states of the scenario (exact free flow when there is no potential)."""
    dt = dt or sc.dt
    psi0 = sc.initial_state()
    if Vt is None and sc.source is None:
        times = np.arange(0.0, sc.t_max + 0.5 * sc.sample_dt, sc.sample_dt)
        times = times[times <= sc.t_max + 1e-12]
        return times, free_evolve_many(psi0, times)
    sample_dt = max(sc.sample_dt, dt)
    tr = evolve(Vt, psi0, sc.t_max, dt, source=sc.source, sample_dt=sample_dt,
                check_mass=sc.source is None)
    return tr.times, tr.states


def _l2_time(values, times) -> float:
    return float(np.sqrt(np.trapezoid(np.asarray(values) ** 2, times)))


def _half_sampled(values, times):
    """Time integral on every other sample; the difference to the full rule
    estimates the time-quadrature error."""
    idx = np.arange(0, len(times), 2)
    if idx[-1] != len(times) - 1:
        return None
    return _l2_time(np.asarray(values)[idx], np.asarray(times)[idx])


def _status(value: float, error: float, ok: bool) -> str:
    if not np.isfinite(value):
        return "fail"
    if abs(error) > INCONCLUSIVE_FRACTION * abs(value) and value != 0:
        return "inconclusive"
    return "pass" if ok else "fail"


# --------------------------------------------------------------------------
# hypotheses


@dataclass
class HypothesisCheck:
    weight_norm: float
    rate_norm: float
    resonance_margin: float
    resonance_threshold: float
    reports: list

    @property
    def compliant(self) -> bool:
        return (np.isfinite(self.weight_norm) and np.isfinite(self.rate_norm)
                and self.resonance_margin >= self.resonance_threshold)


def check_hypotheses(sc: Scenario, Vt=None, knots: int = 3, threshold: float = 5e-2) -> HypothesisCheck:
    """Anisotropic weight norm, ``d/dt V`` rate norm and resonance margin on a few time knots.

    The weight norm is the maximum over knots and the coordinate directions;
    the resonance margin is the minimum over knots.
    """
    Vt = sc.time_potential() if Vt is None else Vt
    if Vt is None:
        return HypothesisCheck(0.0, 0.0, float("inf"), threshold, [])
    ts = np.linspace(0.0, sc.t_max, knots)
    reports, wmax, margin = [], 0.0, float("inf")
    green = FreeGreen(Vt.grid)
    for t in ts:
        V = Vt(t)
        for om in np.eye(3):
            r = anisotropic_weight_norm(V, om, sc.epsilon)
            reports.append(r)
            wmax = max(wmax, r.value)
        margin = min(margin, resonance_test(V, threshold=threshold, green=green).margin)
    rn = rate_norm(Vt, sc.p, np.linspace(0.0, sc.t_max, 4 * knots + 1))
    reports.append(rn)
    return HypothesisCheck(wmax, rn.value, margin, threshold, reports)


# --------------------------------------------------------------------------
# Strichartz


@dataclass
class StrichartzResult:
    ratio: float
    lhs: float
    rhs: float
    error_estimate: float
    times: np.ndarray
    norms: np.ndarray
    counts: np.ndarray
    hypotheses: Optional[HypothesisCheck] = None

    def __float__(self):
        return self.ratio

    def rows(self):
        for t, v in zip(self.times, self.norms):
            yield {"t": t, "L6_2_norm_Pc": v}


def _source_norm(sc: Scenario, times) -> float:
    if sc.source is None:
        return 0.0
    vals = [lorentz_norm(sc.source(t), 6 / 5, 2).value for t in times]
    return _l2_time(vals, times)


def strichartz_ratio(sc: Scenario, check: bool = True, refine: bool = True,
                     projector: ContinuousProjector | None = None) -> StrichartzResult:
    """``||P_c psi||_{L^2_t L^(6,2)_x} / (||psi0||_2 + ||Psi||_{L^2_t L^(6/5,2)_x})`` on ``[0, t_max]``.

    ``P_c(t)`` is recomputed every ``projector_every`` propagator steps.  The
    error estimate combines a ``2 dt`` rerun (divided by 3, second order) with
    the change under halving the time samples.  With ``check``, hypothesis
    violations are reported as warnings.
    """
    Vt = sc.time_potential()
    hyp = None
    if check and Vt is not None:
        hyp = check_hypotheses(sc, Vt)
        if not hyp.compliant:
            warnings.warn(f"scenario violates the hypotheses (weight {hyp.weight_norm:.3g}, "
                          f"rate {hyp.rate_norm:.3g}, resonance margin "
                          f"{hyp.resonance_margin:.3g}); running anyway", RuntimeWarning,
                          stacklevel=2)
    P = projector or ContinuousProjector(Vt, sc.t_max, sc.projector_every * sc.dt)

    def measure(dt):
        times, states = _trajectory(sc, Vt, dt)
        vals = np.array([lorentz_norm(P.continuous(t, s), 6, 2).value
                         for t, s in zip(times, states)])
        return times, vals

    times, vals = measure(sc.dt)
    psi_norm = sc.initial_state().norm()
    rhs = psi_norm + _source_norm(sc, times)
    lhs = _l2_time(vals, times)
    if rhs == 0:
        return StrichartzResult(0.0, 0.0, 0.0, 0.0, times, vals, P.counts, hyp)
    err = 0.0
    half = _half_sampled(vals, times)
    if half is not None:
        err = abs(half - lhs)
    if refine and Vt is not None:
        steps = int(round(sc.t_max / sc.dt))
        if steps % 2 == 0:
            t2, v2 = measure(2 * sc.dt)
            err = max(err, abs(_l2_time(v2, t2) - lhs) / 3)
    return StrichartzResult(lhs / rhs, lhs, rhs, err / rhs, times, vals, P.counts, hyp)


# --------------------------------------------------------------------------
# decay


@dataclass
class DecayFit:
    slope: float
    stderr: float
    window: tuple
    times: np.ndarray
    sup: np.ndarray
    valid: np.ndarray

    def rows(self):
        for t, s, v in zip(self.times, self.sup, self.valid):
            yield {"t": t, "sup_norm_Pc": s, "in_window": int(v)}


def decay_fit(sc: Scenario, t_start: float = 1.0, wrap_tol: float = 0.1,
              samples: int = 16) -> DecayFit:
    """Log-log slope of ``sup |P_c psi(t)|`` over the wrap-free window.

    The window starts at ``t_start`` and ends before the first sample whose
    boundary ratio exceeds ``wrap_tol``.  Samples are log-spaced for the free
    flow and taken on the ``sample_dt`` grid otherwise.
    """
    Vt = sc.time_potential()
    psi0 = sc.initial_state()
    if Vt is None and sc.source is None:
        times = np.unique(np.concatenate([[0.0], np.geomspace(t_start, sc.t_max, samples)]))
        states = (free_evolve(psi0, t) for t in times)  # streamed: large grids
        P = ContinuousProjector(None, sc.t_max, 1.0)
    else:
        P = ContinuousProjector(Vt, sc.t_max, sc.projector_every * sc.dt)
        times, states = _trajectory(sc, Vt)
    sup, valid, wrapped = [], [], False
    for t, s in zip(times, states):
        pc = P.continuous(t, s)
        sup.append(float(np.max(np.abs(pc.values))))
        wrapped = wrapped or boundary_ratio(pc) > wrap_tol
        valid.append(t >= t_start - 1e-12 and not wrapped)
    times, sup, valid = np.asarray(times), np.asarray(sup), np.asarray(valid)
    if valid.sum() < 3:
        raise WindowTooShort(f"fewer than 3 wrap-free samples after t={t_start}")
    tw = times[valid]
    if tw[-1] / tw[0] < math.sqrt(10):
        raise WindowTooShort(f"valid window [{tw[0]:.3g}, {tw[-1]:.3g}] spans less than half a decade")
    fit = stats.linregress(np.log(tw), np.log(sup[valid]))
    return DecayFit(float(fit.slope), float(fit.stderr), (float(tw[0]), float(tw[-1])),
                    times, sup, valid)


# --------------------------------------------------------------------------
# local smoothing


@dataclass
class SmoothingResult:
    ratio: float
    lhs: float
    rhs: float
    side: float
    error_estimate: float

    def __float__(self):
        return self.ratio

    def row(self) -> dict:
        return {"side": self.side, "ratio": self.ratio, "lhs": self.lhs, "rhs": self.rhs,
                "error_estimate": self.error_estimate}


def half_derivative(f: Field3) -> Field3:
    """``D^(1/2) f`` as the Fourier multiplier ``|xi|^(1/2)``."""
    g = f.grid
    return Field3(g, ifftn(fftn(f.values) * np.sqrt(g.freq_radius)))


def smoothing_ratio(sc: Scenario, side: float = 2.0, trajectory=None,
                    projector: ContinuousProjector | None = None) -> SmoothingResult:
    """``||D^(1/2) P_c psi||_{L^2_t L^2(Q)} / (|Q|^(1/6) ||psi0||_2)`` for the centred cube ``Q``."""
    g = sc.grid
    if not 0 < side <= 2 * g.L:
        raise ValueError(f"cube side {side} does not fit in the grid")
    psi0 = sc.initial_state()
    n0 = psi0.norm()
    if n0 == 0:
        return SmoothingResult(0.0, 0.0, 0.0, side, 0.0)
    Vt = sc.time_potential()
    times, states = trajectory or _trajectory(sc, Vt)
    P = projector or ContinuousProjector(Vt, sc.t_max, sc.projector_every * sc.dt)
    x, y, z = g.coords
    inside = (np.abs(x) < side / 2) & (np.abs(y) < side / 2) & (np.abs(z) < side / 2)
    vals = []
    for t, s in zip(times, states):
        d = half_derivative(P.continuous(t, s)).values
        vals.append(math.sqrt(g.cell * float(np.sum(np.abs(d[inside]) ** 2))))
    lhs = _l2_time(vals, times)
    half = _half_sampled(vals, times)
    err = abs(half - lhs) if half is not None else 0.0
    rhs = side ** 0.5 * n0
    return SmoothingResult(lhs / rhs, lhs, rhs, side, err / rhs)


# --------------------------------------------------------------------------
# transformed equation


@dataclass
class TransformedResidual:
    """Per checkpoint: the free-equation residual of ``phi = W*(t) psi(t)`` and its parts."""

    times: np.ndarray
    residual: np.ndarray      # || i phi_t - Laplacian phi || (Duhamel form)
    source_term: np.ndarray   # || W*(t) Psi(t) ||
    continuous_term: np.ndarray  # || i (dW*/dt) P_c psi ||
    bound_term: np.ndarray    # || i (dW*/dt) P_p psi ||
    limit_defect: np.ndarray  # || (-Laplacian W*_T - W*_T H) psi ||, zero in the limit T -> inf
    mismatch: np.ndarray      # || residual - source - continuous - bound - defect || (vector sum)

    def rows(self):
        for i, t in enumerate(self.times):
            yield {"t": t, "residual": self.residual[i], "source_term": self.source_term[i],
                   "continuous_term": self.continuous_term[i], "bound_term": self.bound_term[i],
                   "limit_defect": self.limit_defect[i], "mismatch": self.mismatch[i]}


def transformed_equation_residual(sc: Scenario, checkpoints=None, delta: float | None = None,
                                  wave_kw: dict | None = None) -> TransformedResidual:
    """Residual of the free equation satisfied by ``phi(t) = W*(t) psi(t)``.

    ``W*(t)`` is the adjoint dynamic wave operator of the frozen potential
    ``V(t)``, mapping the perturbed flow to the free one.  The residual is
    ``i (U(-delta) phi(t + delta) - U(delta) phi(t - delta)) / (2 delta)`` with
    ``U`` the free flow, which vanishes identically on free solutions and
    approximates ``i phi_t - Laplacian phi`` to second order.  Its limit time is
    fixed at each checkpoint and reused at ``t +- delta``, so that ``phi_t``
    and ``dW*/dt`` are central differences of one smooth family.  ``delta``
    defaults to ``2 dt``.  Raises :class:`~dispersive_lab.waveops.NotConverged`
    if a wave-operator limit fails at any checkpoint.
    """
    Vt = sc.time_potential()
    delta = delta or 2 * sc.dt
    if checkpoints is None:
        checkpoints = [0.5 * sc.t_max]
    checkpoints = np.asarray(checkpoints, float)
    if np.any(checkpoints - delta < 0) or np.any(checkpoints + delta > sc.t_max + 1e-12):
        raise ValueError("checkpoints must lie at least delta inside [0, t_max]")
    if abs(delta / sc.dt - round(delta / sc.dt)) > 1e-9:
        raise ValueError("delta must be a multiple of dt")
    kw = {"strict": True, "check_resonance": False}
    kw.update(wave_kw or {})
    g = sc.grid
    psi0 = sc.initial_state()
    zero = Field3(g, np.zeros(g.shape, complex))
    gap = -torus_threshold_energy(g)

    def states_around(t):
        if Vt is None and sc.source is None:
            return [free_evolve(psi0, s) for s in (t - delta, t, t + delta)]
        start = t - delta
        steps = int(round(start / sc.dt))
        if steps:
            first = evolve(Vt, psi0, steps * sc.dt, sc.dt, source=sc.source, store=False,
                           check_mass=sc.source is None).final
        else:
            first = psi0
        tr = evolve(Vt, first, 2 * delta, sc.dt, source=sc.source, sample_dt=delta, t0=start,
                    check_mass=False)
        return list(tr.states)

    out = {k: [] for k in ("residual", "source", "cont", "bound", "defect", "mismatch")}
    for t in checkpoints:
        psi_m, psi_0, psi_p = states_around(t)
        if Vt is None:
            def Wstar(s, f):
                return f
            spec = empty_spectrum(g)
        else:
            specs = {s: bound_states(Vt(s), k_max=2, guard=1, delta_gap=gap, tol=1e-6)
                     for s in (t - delta, t, t + delta)}
            spec = specs[t]
            lim = dynamic_wave_operator(Vt(t), psi_0, adjoint=True, spectrum=spec, **kw)
            T = lim.checkpoints[-1]
            dt_w = kw.get("dt", 5e-3)

            def Wstar(s, f):
                return wave_operator_at(Vt(s), f, T, dt_w, adjoint=True, spectrum=specs[s])
        phi_m, phi_0, phi_p = Wstar(t - delta, psi_m), Wstar(t, psi_0), Wstar(t + delta, psi_p)
        # i phi_t - Laplacian phi in Duhamel form: exact zero for free solutions
        R = (free_evolve(phi_p, -delta) - free_evolve(phi_m, delta)) * (0.5j / delta)
        S = Wstar(t, sc.source(t)) if sc.source is not None else zero
        if Vt is None or Vt.is_static:
            C = B = zero
        else:
            pb = project_bound(spec, psi_0)
            pc = psi_0 - pb
            C = (Wstar(t + delta, pc) - Wstar(t - delta, pc)) * (0.5j / delta)
            B = ((Wstar(t + delta, pb) - Wstar(t - delta, pb)) * (0.5j / delta)
                 if pb.norm() else zero)
        if Vt is None:
            E = zero
        else:
            E = (Field3(g, ifftn(fftn(phi_0.values) * g.xi2))
                 - Wstar(t, apply_hamiltonian(Vt(t), psi_0)))
        out["residual"].append(R.norm())
        out["source"].append(S.norm())
        out["cont"].append(C.norm())
        out["bound"].append(B.norm())
        out["defect"].append(E.norm())
        out["mismatch"].append((R - S - C - B - E).norm())
    a = {k: np.asarray(v) for k, v in out.items()}
    return TransformedResidual(checkpoints, a["residual"], a["source"], a["cont"], a["bound"],
                               a["defect"], a["mismatch"])


# --------------------------------------------------------------------------
# heterogeneous retarded Strichartz


@dataclass
class RetardedResult:
    ratio: float
    lhs: float
    rhs: float
    omega1: tuple
    omega2: tuple

    def __float__(self):
        return self.ratio

    def row(self) -> dict:
        return {"omega1": " ".join(f"{c:.6g}" for c in self.omega1),
                "omega2": " ".join(f"{c:.6g}" for c in self.omega2),
                "lhs": self.lhs, "rhs": self.rhs, "ratio": self.ratio}


def retarded_duhamel(F: list, times) -> list:
    """``u(t_k) = int_{s < t_k} exp(-i (t_k - s) Laplacian) F(s) ds`` by the trapezoid rule in ``s``."""
    times = np.asarray(times, float)
    if len(F) != len(times) or len(times) < 2:
        raise ValueError("need matching F samples and at least two times")
    dts = np.diff(times)
    if np.any(dts <= 0):
        raise ValueError("times must increase")
    g = F[0].grid
    xi2 = g.xi2
    rel = times - times[0]
    acc = np.zeros(g.shape, complex)
    prev = None
    out = [Field3(g, np.zeros(g.shape, complex))]
    for k in range(len(times)):
        cur = np.exp(-1j * rel[k] * xi2) * fftn(F[k].values)
        if prev is not None:
            acc = acc + 0.5 * dts[k - 1] * (prev + cur)
            out.append(Field3(g, ifftn(np.exp(1j * rel[k] * xi2) * acc)))
        prev = cur
    return out


def _time_norm(vals, times, q):
    return float(np.trapezoid(np.asarray(vals) ** q, times) ** (1 / q))


def retarded_strichartz_check(F: list, times, omega1, omega2) -> RetardedResult:
    """``||retarded Duhamel of F||_{L^4_t L^inf_w2 L^2_w2perp} / ||F||_{L^(4/3)_t L^1_w1 L^2_w1perp}``.

    ``F`` is a list of :class:`Field3` samples at ``times``.  Only time
    differences enter, so the ratio is invariant under translation of ``times``.
    """
    w1 = tuple(float(c) for c in np.asarray(omega1, float) / np.linalg.norm(omega1))
    w2 = tuple(float(c) for c in np.asarray(omega2, float) / np.linalg.norm(omega2))
    times = np.asarray(times, float)
    rhs_vals = [directional_norm(f, w1, outer=1) for f in F]
    rhs = _time_norm(rhs_vals, times, 4 / 3)
    if rhs == 0:
        return RetardedResult(0.0, 0.0, 0.0, w1, w2)
    u = retarded_duhamel(F, times)
    lhs = _time_norm([directional_norm(f, w2, outer=np.inf) for f in u], times, 4)
    return RetardedResult(lhs / rhs, lhs, rhs, w1, w2)


def random_source(grid, rng: np.random.Generator, times, packets: int = 3,
                  band: float = 2.0) -> list:
    """Sum of Gaussian packets (random centres within 2, momenta below ``band``)
    each switched on by a random Gaussian pulse in time."""
    times = np.asarray(times, float)
    T = times[-1] - times[0]
    out = [np.zeros(grid.shape, complex) for _ in times]
    for _ in range(packets):
        c = rng.uniform(-2.0, 2.0, 3)
        k = rng.uniform(-1.0, 1.0, 3)
        k *= band * rng.uniform(0.2, 1.0) / max(np.linalg.norm(k), 1e-12)
        w = rng.uniform(0.8, 1.5)
        pkt = gaussian_packet(grid, w, tuple(c), tuple(k)).values * np.exp(2j * np.pi * rng.random())
        t0 = times[0] + rng.uniform(0.2, 0.8) * T
        tw = rng.uniform(0.1, 0.25) * T
        for i, t in enumerate(times):
            out[i] = out[i] + np.exp(-0.5 * ((t - t0) / tw) ** 2) * pkt
    return [Field3(grid, v) for v in out]


# --------------------------------------------------------------------------
# reports


@dataclass
class CheckResult:
    check: str
    value: float
    error_estimate: float
    status: str
    table: list = field(default_factory=list)
    columns: tuple = ()
    message: str = ""
    extra: dict = field(default_factory=dict)  # additional CSV files: name -> text

    def summary_row(self) -> dict:
        return {"check": self.check, "value": self.value, "error_estimate": self.error_estimate,
                "status": self.status}

    def to_csv(self) -> str:
        out = io.StringIO()
        cols = list(self.columns or (self.table[0].keys() if self.table else ()))
        w = csv.DictWriter(out, fieldnames=cols)
        w.writeheader()
        for r in self.table:
            w.writerow(r)
        return out.getvalue()


@dataclass
class Report:
    scenario: Scenario
    results: list = field(default_factory=list)

    def __len__(self):
        return len(self.results)

    def __getitem__(self, check: str) -> CheckResult:
        for r in self.results:
            if r.check == check:
                return r
        raise KeyError(check)

    @property
    def statuses(self) -> dict:
        return {r.check: r.status for r in self.results}

    def summary_csv(self) -> str:
        out = io.StringIO()
        w = csv.DictWriter(out, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        for r in self.results:
            w.writerow(r.summary_row())
        return out.getvalue()

    def write(self, out_dir: str) -> list:
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for r in self.results:
            if r.table or r.columns:
                p = os.path.join(out_dir, f"{r.check}.csv")
                with open(p, "w", newline="") as fh:
                    fh.write(r.to_csv())
                paths.append(p)
            for name, text in r.extra.items():
                p = os.path.join(out_dir, name)
                with open(p, "w", newline="") as fh:
                    fh.write(text)
                paths.append(p)
        p = os.path.join(out_dir, "summary.csv")
        with open(p, "w", newline="") as fh:
            fh.write(self.summary_csv())
        paths.append(p)
        return paths


@dataclass
class Envelopes:
    """Pass thresholds for the configured checks."""

    strichartz_factor: float = 3.0    # ratio / free-case ratio
    smoothing_factor: float = 3.0     # ratio / free-case ratio
    decay_max_slope: float = -1.4
    free_decay_slope: float = -1.5
    free_decay_tol: float = 0.05
    transformed_tol: float = 0.1      # mismatch / (source + continuous + bound + residual)
    resonance_threshold: float = 5e-2
    retarded_sources: int = 10


def _run_trajectory(sc, ctx, env):
    from .propagator import Trajectory, energy, mass
    Vt = ctx["Vt"]
    times, states = ctx["trajectory"]()
    m = np.array([mass(s) for s in states])
    e = np.array([energy(s, Vt(t) if Vt is not None else None) for t, s in zip(times, states)])
    tr = Trajectory(times, states, m, e, sc.dt)
    drift = float(abs(m[-1] - m[0]) / max(m[0], 1e-300) / max(sc.t_max, 1.0))
    rows = list(tr.rows())
    ok = sc.source is not None or drift <= 1e-10
    return CheckResult("trajectory", drift, 0.0, _status(drift, 0.0, ok), rows,
                       ("t", "mass", "energy", "sup_norm", "L6_2_norm"),
                       "value is the relative mass drift per unit time")


def _run_hypotheses(sc, ctx, env):
    h = check_hypotheses(sc, ctx["Vt"], threshold=env.resonance_threshold)
    text = reports_to_csv(h.reports) if h.reports else "norm_id,params,value,tail\n"
    rows = [{"quantity": "weight_norm", "value": h.weight_norm},
            {"quantity": "rate_norm", "value": h.rate_norm},
            {"quantity": "resonance_margin", "value": h.resonance_margin}]
    status = "pass" if h.compliant else "fail"
    return CheckResult("hypotheses", h.resonance_margin, 0.0, status, rows, ("quantity", "value"),
                       extra={"hypothesis_norms.csv": text})


def _run_strichartz(sc, ctx, env):
    res = strichartz_ratio(sc, projector=ctx["projector"]())
    free = strichartz_ratio(sc.free_reference(), check=False, refine=False)
    ok = res.ratio <= env.strichartz_factor * free.ratio
    rows = [dict(r, free_L6_2_norm=fv) for r, fv in zip(res.rows(), free.norms)]
    return CheckResult("strichartz", res.ratio, res.error_estimate,
                       _status(res.ratio, res.error_estimate, ok), rows,
                       ("t", "L6_2_norm_Pc", "free_L6_2_norm"),
                       f"free-case ratio {free.ratio:.6g}")


def _run_decay(sc, ctx, env):
    fit = decay_fit(sc)
    if sc.family == "free" and sc.source is None:
        ok = abs(fit.slope - env.free_decay_slope) <= env.free_decay_tol
    else:
        ok = fit.slope <= env.decay_max_slope
    return CheckResult("decay", fit.slope, fit.stderr, _status(fit.slope, fit.stderr, ok),
                       list(fit.rows()), ("t", "sup_norm_Pc", "in_window"),
                       f"window [{fit.window[0]:.3g}, {fit.window[1]:.3g}]")


def _run_smoothing(sc, ctx, env):
    traj = ctx["trajectory"]()
    P = ctx["projector"]()
    rows, worst = [], None
    free_sc = sc.free_reference()
    free_traj = _trajectory(free_sc, None)
    for side in (2.0, 4.0):
        r = smoothing_ratio(sc, side, traj, P)
        f = smoothing_ratio(free_sc, side, free_traj, ContinuousProjector(None, sc.t_max, 1.0))
        rows.append(dict(r.row(), free_ratio=f.ratio))
        if worst is None or r.ratio / f.ratio > worst[0].ratio / worst[1].ratio:
            worst = (r, f)
    r, f = worst
    ok = r.ratio <= env.smoothing_factor * f.ratio
    return CheckResult("smoothing", r.ratio, r.error_estimate, _status(r.ratio, r.error_estimate, ok),
                       rows, ("side", "ratio", "lhs", "rhs", "error_estimate", "free_ratio"))


def _run_transformed(sc, ctx, env):
    tr = transformed_equation_residual(sc)
    scale_ = (tr.residual + tr.source_term + tr.continuous_term + tr.bound_term
              + tr.limit_defect)
    rel = float(np.max(tr.mismatch / np.maximum(scale_, 1e-300)))
    ok = rel <= env.transformed_tol
    val = float(np.max(tr.residual))
    return CheckResult("transformed", val, float(np.max(tr.mismatch)),
                       "pass" if ok else "fail", list(tr.rows()),
                       ("t", "residual", "source_term", "continuous_term", "bound_term",
                        "limit_defect", "mismatch"),
                       f"relative mismatch {rel:.3g}")


def _run_retarded(sc, ctx, env):
    rng = np.random.default_rng(sc.seed)
    g = sc.grid
    times = np.arange(0.0, sc.t_max + 0.5 * sc.sample_dt, sc.sample_dt)
    e1, e3 = (1.0, 0.0, 0.0), (0.0, 0.0, 1.0)
    rows, aligned, cross = [], [], []
    for j in range(env.retarded_sources):
        F = random_source(g, rng, times)
        a = retarded_strichartz_check(F, times, e3, e3)
        c = retarded_strichartz_check(F, times, e3, e1)
        aligned.append(a.ratio)
        cross.append(c.ratio)
        rows.append(dict(a.row(), source=j))
        rows.append(dict(c.row(), source=j))
    env_a, env_c = max(aligned), max(cross)
    ok = np.isfinite(env_a) and np.isfinite(env_c) and env_c <= 2 * env_a
    return CheckResult("retarded", env_a, 0.0, "pass" if ok else "fail", rows,
                       ("source", "omega1", "omega2", "lhs", "rhs", "ratio"),
                       f"cross-direction envelope {env_c:.6g}")


def _run_resonance(sc, ctx, env):
    Vt = ctx["Vt"]
    if Vt is None:
        return CheckResult("resonance", float("inf"), 0.0, "pass", [],
                           ("t", "verdict", "distance", "threshold", "eigenvalues"))
    green = FreeGreen(sc.grid)
    rows, margin = [], float("inf")
    for t in np.linspace(0.0, sc.t_max, 5):
        rep = resonance_test(Vt(t), threshold=env.resonance_threshold, green=green)
        rows.append(dict(rep.row(), t=t))
        margin = min(margin, rep.margin)
    ok = margin >= env.resonance_threshold
    return CheckResult("resonance", margin, 0.0, "pass" if ok else "fail", rows,
                       ("t", "verdict", "distance", "threshold", "eigenvalues"))


def _run_count(sc, ctx, env):
    Vt = ctx["Vt"]
    times = np.linspace(0.0, sc.t_max, 9)
    if Vt is None:
        rows = [{"t": t, "count": 0} for t in times]
        return CheckResult("count", 0.0, 0.0, "pass", rows, ("t", "count"))
    tl = eigen_count_timeline(Vt, times, threshold=env.resonance_threshold)
    rows = [{"t": t, "count": int(c)} for t, c in zip(tl.times, tl.counts)]
    ok = len(tl.changes) == 0
    msg = "; ".join(f"t={t:g}: {a}->{b} (margin {m:.3g})" for t, a, b, m in tl.changes)
    return CheckResult("count", float(len(tl.changes)), 0.0, "pass" if ok else "fail", rows,
                       ("t", "count"), msg)


def _run_estim(sc, ctx, env):
    Vt = ctx["Vt"]
    if Vt is None:
        return CheckResult("estim", float("nan"), 0.0, "fail", [], ("ratio", "total", "norm",
                                                                    "error_estimate"),
                           "estim needs a nonzero potential")
    V = Vt(0.0)
    res = estim_ratio(V)
    prof = profile_L(V)
    ok = np.isfinite(res.ratio)
    return CheckResult("estim", res.ratio, res.error_estimate * res.ratio,
                       _status(res.ratio, res.error_estimate * res.ratio, ok), [res.row()],
                       ("ratio", "total", "norm", "error_estimate"),
                       extra={"lprofile.csv": prof.to_csv()})


_RUNNERS = {
    "trajectory": _run_trajectory,
    "hypotheses": _run_hypotheses,
    "strichartz": _run_strichartz,
    "decay": _run_decay,
    "smoothing": _run_smoothing,
    "transformed": _run_transformed,
    "retarded": _run_retarded,
    "resonance": _run_resonance,
    "count": _run_count,
    "estim": _run_estim,
}


def run_scenario(sc: Scenario, envelopes: Envelopes | None = None) -> Report:
    """Run every configured check; a failing check is recorded with status ``error``
    and does not stop the others."""
    env = envelopes or Envelopes()
    report = Report(sc)
    if not sc.checks:
        return report
    Vt = sc.time_potential()
    memo = {}

    def lazy(name, fn):
        def get():
            if name not in memo:
                memo[name] = fn()
            return memo[name]
        return get

    ctx = {"Vt": Vt,
           "trajectory": lazy("trajectory", lambda: _trajectory(sc, Vt)),
           "projector": lazy("projector", lambda: ContinuousProjector(
               Vt, sc.t_max, sc.projector_every * sc.dt))}
    for check in sc.checks:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                res = _RUNNERS[check](sc, ctx, env)
        except Exception as exc:  # isolate per-check failures
            log.warning("check %s failed: %s", check, exc)
            res = CheckResult(check, float("nan"), float("nan"), "error", message=str(exc))
        report.results.append(res)
    return report
