"""Time evolution for ``i psi_t - Laplacian psi + V(x, t) psi = Psi``.

Written as ``psi_t = i H(t) psi - i Psi`` with ``H = -Laplacian + V``, the
free flow multiplies Fourier data by ``exp(+i t |xi|^2)``.  The operator
``exp(i t Laplacian)`` is therefore ``free_evolve(f, -t)``.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .fields import Field3, Grid3, Potential, Profile, fftn, ifftn, sample
from .norms import lorentz_norm

log = logging.getLogger(__name__)

STABILITY_CAP = 0.5
MASS_DRIFT_ABORT = 1e-6


class InstabilityError(RuntimeError):
    pass


def _const(c):
    return lambda t: c


# --------------------------------------------------------------------------
# time-dependent potentials


@dataclass
class TimePotential:
    """``V(x, t) = lam(t) alpha(t)^2 V0(alpha(t) (x - a(t))) + mu(t) W(x)``.

    ``V0`` is a :class:`Profile` (needed whenever ``a`` or ``alpha`` move)
    or a sampled :class:`Potential`.  Every modulation carries its analytic
    rate so ``derivative`` needs no finite differences.
    """

    grid: Grid3
    base: object
    family: str = "static"
    path: Callable = _const(np.zeros(3))
    path_rate: Callable = _const(np.zeros(3))
    scale: Callable = _const(1.0)
    scale_rate: Callable = _const(0.0)
    amplitude: Callable = _const(1.0)
    amplitude_rate: Callable = _const(0.0)
    perturbation: Optional[object] = None
    perturbation_amplitude: Callable = _const(0.0)
    perturbation_rate: Callable = _const(0.0)
    supersample: int = 1
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    FAMILIES = ("static", "translate", "scale", "ramp", "perturbed")

    def __post_init__(self):
        if self.family not in self.FAMILIES:
            raise ValueError(f"unknown potential family {self.family!r}")
        if self.family in ("translate", "scale") and not isinstance(self.base, Profile):
            raise ValueError(f"family {self.family!r} needs an analytic profile")

    def __call__(self, t: float) -> Potential:
        return self.at(t)

    def _base_values(self, t, need_coords: bool = False):
        a = np.asarray(self.path(t), float)
        al = float(self.scale(t))
        if isinstance(self.base, Potential):
            return self.base.values, None
        if np.allclose(a, 0) and al == 1.0 and not need_coords:
            key = "base"
            if key not in self._cache:
                self._cache[key] = sample(self.base, self.grid, self.supersample).values
            return self._cache[key], None
        x, y, z = self.grid.coords
        u = (al * (x - a[0]), al * (y - a[1]), al * (z - a[2]))
        return al ** 2 * self.base(*u), u

    def _perturbation_values(self):
        W = self.perturbation
        if W is None:
            return 0.0
        if isinstance(W, Potential):
            return W.values
        if "pert" not in self._cache:
            self._cache["pert"] = sample(W, self.grid, self.supersample).values
        return self._cache["pert"]

    def at(self, t: float) -> Potential:
        vals, _ = self._base_values(t)
        out = float(self.amplitude(t)) * vals
        if self.perturbation is not None:
            out = out + float(self.perturbation_amplitude(t)) * self._perturbation_values()
        return Potential(self.grid, np.asarray(out, float), f"{self.family}@{t:g}")

    def derivative(self, t: float) -> Potential:
        """Analytic ``dV/dt`` on the grid."""
        lam, dlam = float(self.amplitude(t)), float(self.amplitude_rate(t))
        al, dal = float(self.scale(t)), float(self.scale_rate(t))
        a, da = np.asarray(self.path(t), float), np.asarray(self.path_rate(t), float)
        moving = bool(np.any(da)) or dal != 0.0
        vals, u = self._base_values(t, need_coords=moving)
        if u is None:
            out = dlam * vals
        else:
            base = self.base(*u)
            grad = self.base.gradient(*u)
            x = self.grid.coords
            chain = sum(grad[i] * (dal * (x[i] - a[i]) - al * da[i]) for i in range(3))
            out = dlam * al ** 2 * base + lam * (2 * al * dal * base + al ** 2 * chain)
        if self.perturbation is not None:
            out = out + float(self.perturbation_rate(t)) * self._perturbation_values()
        return Potential(self.grid, np.asarray(out, float), f"d{self.family}@{t:g}")

    @property
    def is_static(self) -> bool:
        return self.family == "static"


def static(V0) -> TimePotential:
    g = V0.grid
    return TimePotential(g, V0, "static")


def translate(profile: Profile, grid: Grid3, velocity, start=(0.0, 0.0, 0.0)) -> TimePotential:
    """Rigid motion along ``a(t) = start + velocity t``."""
    v = np.asarray(velocity, float)
    a0 = np.asarray(start, float)
    return TimePotential(grid, profile, "translate", path=lambda t: a0 + v * t,
                         path_rate=_const(v))


def oscillate(profile: Profile, grid: Grid3, amplitude, frequency: float) -> TimePotential:
    """Bounded motion ``a(t) = amplitude sin(frequency t)``."""
    A = np.asarray(amplitude, float)
    return TimePotential(grid, profile, "translate", path=lambda t: A * np.sin(frequency * t),
                         path_rate=lambda t: A * frequency * np.cos(frequency * t))


def scale(profile: Profile, grid: Grid3, rate: float, kind: str = "linear") -> TimePotential:
    """Scaling-invariant dilation ``alpha(t)^2 V0(alpha(t) x)``."""
    if kind == "linear":
        al, dal = (lambda t: 1.0 + rate * t), _const(rate)
    elif kind == "exp":
        al, dal = (lambda t: np.exp(rate * t)), (lambda t: rate * np.exp(rate * t))
    else:
        raise ValueError(f"unknown scale kind {kind!r}")
    return TimePotential(grid, profile, "scale", scale=al, scale_rate=dal)


def ramp(V0, start: float, stop: float, duration: float, grid: Grid3 | None = None) -> TimePotential:
    """Amplitude ramp ``lam(t)`` linear from ``start`` to ``stop`` over ``duration``, then held."""
    g = grid or V0.grid

    def lam(t):
        return start + (stop - start) * min(max(t / duration, 0.0), 1.0)

    def dlam(t):
        return (stop - start) / duration if 0.0 <= t < duration else 0.0

    return TimePotential(g, V0, "ramp", amplitude=lam, amplitude_rate=dlam)


def perturbed(V0, W, size: float, frequency: float = 1.0, grid: Grid3 | None = None) -> TimePotential:
    """``V0 + size cos(frequency t) W``."""
    g = grid or V0.grid
    return TimePotential(g, V0, "perturbed", perturbation=W,
                         perturbation_amplitude=lambda t: size * np.cos(frequency * t),
                         perturbation_rate=lambda t: -size * frequency * np.sin(frequency * t))


# --------------------------------------------------------------------------
# trajectories


TRAJECTORY_COLUMNS = ("t", "mass", "energy", "sup_norm", "L6_2_norm")


@dataclass
class Trajectory:
    times: np.ndarray
    states: list
    mass: np.ndarray
    energy: np.ndarray
    dt: float = float("nan")

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        n = len(self.times)
        if not (len(self.states) == len(self.mass) == len(self.energy) == n):
            raise ValueError("inconsistent sample counts")

    def __len__(self):
        return len(self.times)

    @property
    def final(self) -> Field3:
        return self.states[-1]

    def sup_norms(self) -> np.ndarray:
        return np.array([np.max(np.abs(s.values)) for s in self.states])

    def lorentz_norms(self, p: float = 6.0, q: float = 2.0) -> np.ndarray:
        return np.array([lorentz_norm(s, p, q).value for s in self.states])

    def rows(self):
        sup, l62 = self.sup_norms(), self.lorentz_norms()
        for i, t in enumerate(self.times):
            yield {"t": t, "mass": self.mass[i], "energy": self.energy[i],
                   "sup_norm": sup[i], "L6_2_norm": l62[i]}

    def to_csv(self, fh=None) -> str:
        out = io.StringIO() if fh is None else fh
        w = csv.DictWriter(out, fieldnames=TRAJECTORY_COLUMNS)
        w.writeheader()
        for r in self.rows():
            w.writerow(r)
        return out.getvalue() if fh is None else ""


def mass(f: Field3) -> float:
    return f.norm() ** 2


def energy(f: Field3, V: Potential | None) -> float:
    """``int |grad f|^2 + V |f|^2``."""
    g = f.grid
    fh = fftn(f.values)
    kin = g.cell * np.sum(g.xi2 * np.abs(fh) ** 2) / f.values.size
    pot = g.cell * np.sum(V.values * np.abs(f.values) ** 2) if V is not None else 0.0
    return float(kin + pot)


def observables(traj: Trajectory, Vt=None) -> tuple[np.ndarray, np.ndarray]:
    """Mass and energy series recomputed from the stored states."""
    m = np.array([mass(s) for s in traj.states])
    e = np.array([energy(s, Vt(t) if Vt is not None else None)
                  for t, s in zip(traj.times, traj.states)])
    return m, e


# --------------------------------------------------------------------------
# evolution


def free_evolve(f: Field3, t: float) -> Field3:
    """Exact free flow of ``i psi_t - Laplacian psi = 0`` over time ``t``."""
    g = f.grid
    return Field3(g, ifftn(fftn(f.values) * np.exp(1j * t * g.xi2)))


def free_evolve_many(f: Field3, times) -> list:
    g = f.grid
    fh = fftn(f.values)
    return [Field3(g, ifftn(fh * np.exp(1j * t * g.xi2))) for t in times]


def _sample_plan(t_max: float, dt: float, sample_dt: float | None):
    if not (dt > 0 and np.isfinite(dt)) or t_max < 0:
        raise ValueError("need dt > 0 and t_max >= 0")
    n_steps = int(round(t_max / dt))
    if abs(n_steps * dt - t_max) > 1e-9 * max(1.0, t_max):
        raise ValueError(f"t_max={t_max} is not a multiple of dt={dt}")
    every = 1 if sample_dt is None else max(1, int(round(sample_dt / dt)))
    return n_steps, every


def evolve(Vt, psi0: Field3, t_max: float, dt: float, source: Callable | None = None,
           sample_dt: float | None = None, t0: float = 0.0, store: bool = True,
           check_mass: bool = True) -> Trajectory:
    """Strang split-step evolution.

    Each step applies half a potential phase at the step midpoint, a full
    kinetic multiplier and the other half potential phase.  A source
    ``Psi(t) -> Field3`` enters by the midpoint Duhamel rule between two
    kinetic half steps.  ``Vt`` may be ``None`` for the free equation.
    """
    g = psi0.grid
    n_steps, every = _sample_plan(t_max, dt, sample_dt)
    kin_full = np.exp(1j * dt * g.xi2)
    kin_half = np.exp(0.5j * dt * g.xi2)
    psi = psi0.values.astype(complex)
    m0 = mass(psi0)

    times, states, masses, energies = [], [], [], []

    def record(t, u):
        f = Field3(g, u.copy())
        times.append(t)
        states.append(f if store else None)
        masses.append(mass(f))
        energies.append(energy(f, Vt(t) if Vt is not None else None))

    record(t0, psi)
    for k in range(n_steps):
        t = t0 + k * dt
        tm = t + 0.5 * dt
        if Vt is not None:
            V = Vt(tm)
            if dt * V.sup > STABILITY_CAP + 1e-12:
                raise ValueError(f"dt*|V|_inf = {dt * V.sup:.3g} exceeds the cap {STABILITY_CAP}")
            phase = np.exp(0.5j * dt * V.values)
            psi = phase * psi
        if source is None:
            psi = ifftn(kin_full * fftn(psi))
        else:
            psi = ifftn(kin_half * fftn(psi))
            psi = psi - 1j * dt * source(tm).values
            psi = ifftn(kin_half * fftn(psi))
        if Vt is not None:
            psi = phase * psi
        if (k + 1) % every == 0 or k + 1 == n_steps:
            record(t + dt, psi)
            if check_mass and source is None and m0 > 0:
                span = times[-1] - t0
                drift = abs(masses[-1] - m0) / m0
                if drift > MASS_DRIFT_ABORT * max(span, 1.0):
                    raise InstabilityError(
                        f"relative mass drift {drift:.3e} at t={times[-1]:g} exceeds "
                        f"{MASS_DRIFT_ABORT:g} per unit time")
    if not store:
        states = [None] * (len(times) - 1) + [Field3(g, psi)]
    return Trajectory(np.array(times), states, np.array(masses), np.array(energies), dt)


def heat_evolve(Vt, psi0: Field3, t_max: float, dt: float, source: Callable | None = None,
                sample_dt: float | None = None) -> Trajectory:
    """Split-step solver for the dissipative ``psi_t - Laplacian psi + V psi = Psi``."""
    g = psi0.grid
    n_steps, every = _sample_plan(t_max, dt, sample_dt)
    kin_full = np.exp(-dt * g.xi2)
    kin_half = np.exp(-0.5 * dt * g.xi2)
    psi = psi0.values.astype(complex)
    times, states, masses, energies = [0.0], [Field3(g, psi.copy())], [mass(psi0)], [
        energy(psi0, Vt(0.0) if Vt is not None else None)]
    for k in range(n_steps):
        tm = (k + 0.5) * dt
        if Vt is not None:
            V = Vt(tm)
            if dt * V.sup > STABILITY_CAP + 1e-12:
                raise ValueError(f"dt*|V|_inf = {dt * V.sup:.3g} exceeds the cap {STABILITY_CAP}")
            damp = np.exp(-0.5 * dt * V.values)
            psi = damp * psi
        if source is None:
            psi = ifftn(kin_full * fftn(psi))
        else:
            psi = ifftn(kin_half * fftn(psi))
            psi = psi + dt * source(tm).values
            psi = ifftn(kin_half * fftn(psi))
        if Vt is not None:
            psi = damp * psi
        if (k + 1) % every == 0 or k + 1 == n_steps:
            t = (k + 1) * dt
            f = Field3(g, psi.copy())
            times.append(t)
            states.append(f)
            masses.append(mass(f))
            energies.append(energy(f, Vt(t) if Vt is not None else None))
    return Trajectory(np.array(times), states, np.array(masses), np.array(energies), dt)


# --------------------------------------------------------------------------
# wrap-around monitors


def boundary_ratio(f: Field3, width: int = 2) -> float:
    """``max |f|`` over the outer ``width`` layers of the box divided by ``max |f|``."""
    a = np.abs(f.values)
    top = a.max()
    if top == 0:
        return 0.0
    edge = a.copy()
    edge[width:-width, width:-width, width:-width] = 0.0
    return float(edge.max() / top)


def outside_mass_fraction(f: Field3, radius: float | None = None) -> float:
    """Fraction of the mass at ``|x| > radius`` (default ``L/2``)."""
    g = f.grid
    r = g.L / 2 if radius is None else radius
    w = np.abs(f.values) ** 2
    tot = w.sum()
    return float(w[g.radius > r].sum() / tot) if tot > 0 else 0.0
