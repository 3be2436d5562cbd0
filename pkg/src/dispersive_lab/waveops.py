"""Wave operators: dynamic strong limits, Born terms, and the kernels K and L+-.

Conventions.  ``U0(t) = exp(-i t Laplacian)`` is the free flow of the
equation (``free_evolve(f, t)``, Fourier multiplier ``exp(i t |xi|^2)``) and
``exp(i t H)`` is the perturbed flow.  With these,

* ``W(T) = exp(i T H) exp(i T Laplacian)`` and ``W = lim W(T)``;
* ``W_1 f = i int_0^inf U0(t) V U0(-t) f dt``, whose damped frequency kernel
  is ``-V^(xi1 - xi2) / (|xi1|^2 - |xi2|^2 + i eta)``;
* ``L+(t, w) = int_0^inf V^(s w) exp(-i t s) s ds``, ``L-(t, w) = L+(-t, -w)``;
* ``K(x, t w) = 1/2 L+(t/2 - x.w, w)``.
"""
from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import optimize
from scipy.integrate import cumulative_trapezoid

from .fields import (FREQUENCY, PHYSICAL, DirectionSet, Field3, Gaussian, Grid3, Potential,
                     SpectrumSampler, fftn, fourier, ifftn, inverse_fourier, make_grid, sample,
                     sphere_quadrature)
from .norms import NormReport, dyadic_shell_norm
from .propagator import free_evolve
from .spectral import SpectralData, bound_states, project_continuous, resonance_test

log = logging.getLogger(__name__)


class UnderResolved(ValueError):
    """A refinement-based error estimate exceeded its gate."""


class NotConverged(RuntimeError):
    pass


# --------------------------------------------------------------------------
# dynamic limits


def _h_flow(V: Potential, u: np.ndarray, T: float, dt: float) -> np.ndarray:
    """Strang approximation of ``exp(i T H) u`` for signed ``T``."""
    if T == 0:
        return u.copy()
    g = V.grid
    n = max(1, int(np.ceil(abs(T) / dt - 1e-9)))
    tau = T / n
    phase = np.exp(0.5j * tau * V.values)
    kin = np.exp(1j * tau * g.xi2)
    u = phase * u
    for k in range(n):
        u = ifftn(kin * fftn(u))
        u = (phase * phase if k < n - 1 else phase) * u
    return u


@dataclass
class WaveOperatorResult:
    value: Field3
    checkpoints: list
    increments: list
    converged: bool
    adjoint: bool = False

    @property
    def last_increment(self) -> float:
        return self.increments[-1] if self.increments else float("nan")


def dynamic_wave_operator(V: Potential, f: Field3, T_max: float = 16.0, dt: float = 5e-3,
                          sign: int = 1, checkpoints=None, tol: float = 1e-4,
                          adjoint: bool = False, spectrum: SpectralData | None = None,
                          check_resonance: bool = True, strict: bool = False) -> WaveOperatorResult:
    """``W_+-`` (or its adjoint) applied to ``f`` as a Cauchy limit over checkpoints.

    The forward operator evaluates ``exp(i T H) exp(i T Laplacian) f`` and the
    adjoint ``exp(-i T Laplacian) exp(-i T H) P_c f`` with ``T -> sign T``.
    The value at the first checkpoint whose change from the previous one is
    below ``tol ||f||`` is returned.  Checkpoints default to ``4, 8, 16, ...``
    up to ``T_max``.
    """
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    if V.grid != f.grid:
        raise ValueError("potential and field live on different grids")
    if V.is_zero():
        return WaveOperatorResult(Field3(f.grid, f.values.copy()), [0.0], [0.0], True, adjoint)
    if check_resonance:
        rep = resonance_test(V)
        if rep.resonant:
            warnings.warn(f"potential is near a zero-energy resonance (|mu+1| = "
                          f"{rep.distance_to_resonance:.3g}); the limit may not exist",
                          RuntimeWarning, stacklevel=2)
    if checkpoints is None:
        checkpoints, T = [], 4.0
        while T <= T_max:
            checkpoints.append(T)
            T *= 2
    checkpoints = [float(T) for T in checkpoints if T <= T_max]
    if not checkpoints:
        raise ValueError("no checkpoint below T_max")
    src = f.values
    if adjoint:
        spec = spectrum if spectrum is not None else bound_states(V)
        src = project_continuous(spec, f).values
    scale = max(f.norm(), 1e-300)
    prev, incs = None, []
    val = None
    for T in checkpoints:
        Ts = sign * T
        if adjoint:
            u = _h_flow(V, src, -Ts, dt)
            val = free_evolve(Field3(f.grid, u), Ts)
        else:
            u0 = free_evolve(Field3(f.grid, src), -Ts).values
            val = Field3(f.grid, _h_flow(V, u0, Ts, dt))
        if prev is not None:
            incs.append((val - prev).norm() / scale)
            if incs[-1] < tol:
                return WaveOperatorResult(val, checkpoints[: len(incs) + 1], incs, True, adjoint)
        prev = val
    msg = (f"wave operator limit not reached by T={checkpoints[-1]:g}; "
           f"last relative increment {incs[-1] if incs else float('nan'):.3g}")
    if strict:
        raise NotConverged(msg)
    log.warning(msg)
    return WaveOperatorResult(val, checkpoints, incs, False, adjoint)


def wave_operator_at(V: Potential, f: Field3, T: float, dt: float = 5e-3, sign: int = 1,
                     adjoint: bool = False, spectrum: SpectralData | None = None) -> Field3:
    """``W(T) f = exp(i T H) exp(i T Laplacian) f`` at one finite ``T`` (``T -> sign T``).

    ``adjoint`` gives ``exp(-i T Laplacian) exp(-i T H) P_c f`` instead, with
    ``P_c`` taken from ``spectrum`` when given.
    """
    Ts = sign * T
    if adjoint:
        src = project_continuous(spectrum, f).values if spectrum is not None else f.values
        return free_evolve(Field3(f.grid, _h_flow(V, src, -Ts, dt)), Ts)
    u0 = free_evolve(f, -Ts).values
    return Field3(f.grid, _h_flow(V, u0, Ts, dt))


def h2_norm(f: Field3) -> float:
    """``||(1 + |xi|^2) f^||_2``."""
    g = f.grid
    fh = fftn(f.values) * (1 + g.xi2)
    return float(np.sqrt(g.cell * np.sum(np.abs(fh) ** 2) / fh.size))


def intertwining_residual(V: Potential, f: Field3, W_apply: Callable[[Field3], Field3],
                          spectrum: SpectralData | None = None) -> float:
    """``||W(H f) - (-Laplacian)(W f)|| / ||f||_{H^2}``.

    With ``spectrum`` given, ``f`` is first replaced by ``P_c f``.
    """
    g = f.grid
    if spectrum is not None:
        f = project_continuous(spectrum, f)
    den = h2_norm(f)
    if den == 0:
        return 0.0
    Hf = Field3(g, ifftn(fftn(f.values) * g.xi2) + V.values * f.values)
    Wf = W_apply(f)
    lap = Field3(g, ifftn(fftn(Wf.values) * g.xi2))
    return (W_apply(Hf) - lap).norm() / den


# --------------------------------------------------------------------------
# Born terms


def _energy_shells(f: Field3, cutoff: float):
    g = f.grid
    fh = fftn(f.values)
    key = np.rint(g.xi2 / g.dk ** 2).astype(np.int64)
    mag = np.abs(fh)
    live = mag > cutoff * mag.max()
    return fh, key, np.unique(key[live]), live


def _frequency_terms(V: Potential, f: Field3, order: int, eta: float, cutoff: float) -> list:
    g = f.grid
    fh, key, shells, live = _energy_shells(f, cutoff)
    acc = [np.zeros(g.shape, complex) for _ in range(order)]
    for k in shells:
        E = k * g.dk ** 2
        res = -1.0 / (g.xi2 - E + 1j * eta)
        u = ifftn(np.where((key == k) & live, fh, 0))
        for n in range(order):
            uh = fftn(V.values * u) * res
            acc[n] += uh
            if n + 1 < order:
                u = ifftn(uh)
    return [Field3(g, ifftn(a)) for a in acc]


def _filon_linear(a: np.ndarray, delta: float):
    """Weights ``(A, B)`` with ``int_0^delta e^(a u) [y0 (1 - u/delta) + y1 u/delta] du = A y0 + B y1``."""
    z = a * delta
    small = np.abs(z) < 1e-3
    zs = np.where(small, 1.0, z)
    ez = np.exp(zs)
    B = np.where(small, 0.5 + z / 3 + z * z / 8, (ez * (zs - 1) + 1) / zs ** 2)
    A0 = np.where(small, 1 + z / 2 + z * z / 6, (ez - 1) / zs)
    return delta * (A0 - B), delta * B


def _time_w1(V: Potential, f: Field3, eta: float, dt: float, T: float) -> np.ndarray:
    """``i int_0^T e^(-eta t) U0(t) V U0(-t) f dt`` with exact exponential weights
    in the output frequency and linear interpolation of the remaining factor."""
    g = f.grid
    n = int(np.ceil(T / dt))
    dt = T / n
    a = -eta + 1j * g.xi2
    A, B = _filon_linear(a, dt)
    step = np.exp(a * dt)
    fh = fftn(f.values)
    back = np.exp(-1j * dt * g.xi2)

    def G(uh):
        return fftn(V.values * ifftn(uh))

    uh = fh.copy()
    G0 = G(uh)
    acc = np.zeros(g.shape, complex)
    ph = np.ones(g.shape, complex)
    for k in range(n):
        uh = uh * back
        G1 = G(uh)
        acc += ph * (A * G0 + B * G1)
        ph *= step
        G0 = G1
    return ifftn(1j * acc)


def born_w1(V: Potential, f: Field3, eta: float, method: str = "frequency",
            dt: float = 0.02, cutoff: float = 1e-10) -> Field3:
    """First Born term ``W_1 f`` regularised by ``eta``.

    ``method="frequency"`` applies the kernel
    ``-V^(xi1 - xi2) / (|xi1|^2 - |xi2|^2 + i eta)`` one input energy shell
    at a time; ``method="time"`` integrates the damped Duhamel formula with
    step ``dt`` (Richardson-extrapolated from ``dt`` and ``dt/2``) up to the
    time where ``exp(-eta t) < 1e-9``.
    """
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    if V.grid != f.grid:
        raise ValueError("potential and field live on different grids")
    if V.is_zero() or not np.any(f.values):
        return Field3(f.grid, np.zeros(f.grid.shape, complex))
    if method == "frequency":
        return _frequency_terms(V, f, 1, eta, cutoff)[0]
    if method == "time":
        T = np.log(1e9) / eta
        c = _time_w1(V, f, eta, dt, T)
        fine = _time_w1(V, f, eta, dt / 2, T)
        return Field3(f.grid, fine + (fine - c) / 3)
    raise ValueError(f"unknown method {method!r}")


@dataclass
class BornDiagnostics:
    norms: np.ndarray
    ratios: np.ndarray
    order: int
    method: str
    eta: float = float("nan")
    T: float = float("nan")

    @property
    def converging(self) -> bool:
        return bool(np.all(self.ratios < 1)) if len(self.ratios) else True

    def row(self) -> dict:
        return {"order": self.order, "method": self.method,
                "norms": " ".join(f"{v:.6g}" for v in self.norms),
                "ratios": " ".join(f"{v:.6g}" for v in self.ratios),
                "converging": self.converging}


@dataclass
class BornSeries:
    terms: list  # W_1 f, ..., W_n f
    diagnostics: BornDiagnostics
    f: Field3

    def partial(self, n: int, coupling: float = 1.0) -> Field3:
        """``f + sum_{k <= n} coupling^k W_k f``."""
        out = self.f.values.astype(complex).copy()
        for k, t in enumerate(self.terms[:n], start=1):
            out = out + coupling ** k * t.values
        return Field3(self.f.grid, out)

    @property
    def value(self) -> Field3:
        return self.partial(len(self.terms))


def _time_ordered_terms(V: Potential, f: Field3, order: int, T: float, dt: float) -> list:
    """Exact coefficients of ``lam^k`` in the Strang-discretised ``W(T)`` for ``lam V``."""
    g = f.grid
    n = max(1, int(np.ceil(T / dt - 1e-9)))
    tau = T / n
    kin = np.exp(1j * tau * g.xi2)
    gen = 0.5j * tau * V.values
    powers = [np.ones(g.shape)]
    for m in range(1, order + 1):
        powers.append(powers[-1] * gen / m)

    def P(c):
        return [sum(powers[m] * c[k - m] for m in range(k + 1)) for k in range(order + 1)]

    c = [free_evolve(f, -T).values] + [np.zeros(g.shape, complex) for _ in range(order)]
    for _ in range(n):
        c = P(c)
        c = [ifftn(kin * fftn(u)) if np.any(u) else u for u in c]
        c = P(c)
    return [Field3(g, u) for u in c[1:]]


def born_series(V: Potential, f: Field3, order: int = 2, eta: float = 0.1,
                method: str = "frequency", T: float = 4.0, dt: float = 5e-3,
                cutoff: float = 1e-10) -> BornSeries:
    """Terms ``W_1 f, ..., W_order f`` of the Duhamel expansion and their diagnostics.

    ``method="frequency"``: chains of the ``eta``-regularised free resolvent on
    each input energy shell.  ``method="time"``: the time-ordered integrals
    truncated at ``T``, discretised exactly as ``dynamic_wave_operator`` so
    that ``W(T)`` minus the partial sum is of the next order in ``V``.
    """
    if not 1 <= order <= 4:
        raise ValueError("order must lie in 1..4")
    if V.grid != f.grid:
        raise ValueError("potential and field live on different grids")
    g = f.grid
    if V.is_zero() or not np.any(f.values):
        terms = [Field3(g, np.zeros(g.shape, complex)) for _ in range(order)]
    elif method == "frequency":
        if not eta > 0:
            raise ValueError(f"eta must be positive, got {eta}")
        terms = _frequency_terms(V, f, order, eta, cutoff)
    elif method == "time":
        terms = _time_ordered_terms(V, f, order, T, dt)
    else:
        raise ValueError(f"unknown method {method!r}")
    norms = np.array([t.norm() for t in terms])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(norms[:-1] > 0, norms[1:] / np.where(norms[:-1] > 0, norms[:-1], 1), 0.0)
    diag = BornDiagnostics(norms, ratios, order, method, eta if method == "frequency" else float("nan"),
                           T if method == "time" else float("nan"))
    if not diag.converging:
        log.warning("Born series ratios %s reach 1; the series is not converging", ratios)
    return BornSeries(terms, diag, f)


def eta_extrapolate(values, etas=(1e-1, 3e-2, 1e-2)) -> complex | np.ndarray:
    """Linear extrapolation to ``eta = 0`` from samples at ``etas`` (least squares)."""
    etas = np.asarray(etas, float)
    vals = np.asarray(values)
    A = np.vstack([np.ones_like(etas), etas]).T
    coef = np.linalg.lstsq(A, vals.reshape(len(etas), -1), rcond=None)[0]
    return coef[0].reshape(vals.shape[1:]) if vals.ndim > 1 else complex(coef[0, 0])


# --------------------------------------------------------------------------
# L+- profiles


def _taper(s: np.ndarray, s_max: float, frac: float) -> np.ndarray:
    if frac <= 0:
        return np.ones_like(s)
    s0 = (1 - frac) * s_max
    u = np.clip((s - s0) / (s_max - s0), 0, 1)
    return np.cos(0.5 * np.pi * u) ** 2


def _ray_samples(V: Potential, dirs: np.ndarray, s: np.ndarray,
                 sampler: SpectrumSampler | None = None) -> np.ndarray:
    sp = sampler or V.spectrum
    xi = s[None, :, None] * dirs[:, None, :]
    return sp(xi)


def filon_sum(g: np.ndarray, ds: float, tau: np.ndarray) -> np.ndarray:
    """``int_0^S g(s) exp(-i tau s) ds`` for ``g`` linear between nodes ``j ds``.

    ``g`` has the node index last; leading axes broadcast against ``tau``.
    """
    tau = np.asarray(tau, float)
    N = g.shape[-1] - 1
    s = ds * np.arange(N + 1)
    E = np.exp(-1j * tau[..., None] * s)
    z = -1j * tau * ds
    small = np.abs(z) < 1e-3
    zs = np.where(small, 1.0, z)
    ez = np.exp(zs)
    mid = np.where(small, 1 + z * z / 12, (np.sin(tau * ds / 2) / np.where(small, 1, tau * ds / 2)) ** 2)
    head = np.where(small, 0.5 + z / 6 + z * z / 24, (ez - 1 - zs) / zs ** 2)
    tail = np.where(small, 0.5 + z / 3 + z * z / 8, (ez * (zs - 1) + 1) / zs ** 2)
    w = np.broadcast_to(mid[..., None], E.shape[:-1] + (N + 1,)).copy()
    w[..., 0] = head
    w[..., -1] = tail * np.exp(1j * tau * ds)
    return ds * np.sum(g * w * E, axis=-1)


@dataclass
class LProfile:
    directions: DirectionSet
    t: np.ndarray
    plus: np.ndarray
    minus: np.ndarray
    total_plus: float
    total_minus: float
    per_direction: np.ndarray  # (n_dir, 2) L1_t norms of L+ and L-
    error_estimate: float
    tail: float
    ds: float
    s_max: float

    @property
    def total(self) -> float:
        return 0.5 * (self.total_plus + self.total_minus)

    def at(self, tau, index: int, which: str = "plus") -> np.ndarray:
        """Cubic interpolation of one direction's samples at ``tau``."""
        from scipy.interpolate import CubicSpline
        arr = self.plus if which == "plus" else self.minus
        re = CubicSpline(self.t, arr[index].real)(tau)
        im = CubicSpline(self.t, arr[index].imag)(tau)
        return re + 1j * im

    def to_csv(self, fh=None) -> str:
        out = io.StringIO() if fh is None else fh
        w = csv.writer(out)
        w.writerow(["direction", "wx", "wy", "wz", "weight", "l1_plus", "l1_minus"])
        d = self.directions
        for i in range(len(d)):
            w.writerow([i, *d.directions[i], d.weights[i], *self.per_direction[i]])
        return out.getvalue() if fh is None else ""


def _l_plus_fft(V: Potential, dirs: np.ndarray, ds: float, M: int | None, taper: float,
                sampler=None):
    """Filon-linear ``L+`` on one period ``t in [-pi/ds, pi/ds)``, FFT order along ``t``."""
    s_max = V.grid.nyquist
    N = int(np.floor(s_max / ds))
    s = ds * np.arange(N + 1)
    M = M or 1 << int(np.ceil(np.log2(16 * (N + 1))))
    if M < N + 1:
        raise ValueError("FFT length shorter than the s-grid")
    gs = _ray_samples(V, dirs, s, sampler) * (s * _taper(s, s[-1], taper))[None, :]
    buf = np.zeros((len(dirs), M), complex)
    buf[:, : N + 1] = gs
    raw = np.fft.fft(buf, axis=1)  # sum_j g_j exp(-2 pi i j k / M)
    t = np.fft.fftfreq(M, d=1.0 / M) * (2 * np.pi / (M * ds))
    x = t * ds / 2
    sinc2 = np.where(x == 0, 1.0, (np.sin(x) / np.where(x == 0, 1, x)) ** 2)
    return t, ds * raw * sinc2[None, :]


def _l1_with_tail(t: np.ndarray, L: np.ndarray):
    a = np.abs(L)
    core = np.trapezoid(a, t, axis=-1)
    tail = a[..., 0] * abs(t[0]) + a[..., -1] * abs(t[-1])
    return core + tail, tail


def _profile(V, dirs: DirectionSet, ds, M, taper, sampler=None):
    d = dirs.directions
    t, Lp = _l_plus_fft(V, d, ds, M, taper, sampler)
    _, Ln = _l_plus_fft(V, -d, ds, M, taper, sampler)
    m = len(t)
    Lm = Ln[:, (-np.arange(m)) % m]  # L-(t, w) = L+(-t, -w)
    order = np.argsort(t)
    t, Lp, Lm = t[order], Lp[:, order], Lm[:, order]
    l1p, tp = _l1_with_tail(t, Lp)
    l1m, tmt = _l1_with_tail(t, Lm)
    return t, Lp, Lm, l1p, l1m, tp, tmt


def profile_L(V: Potential, dirs: DirectionSet | None = None, ds: float | None = None,
              M: int | None = None, taper: float = 0.15, stride: int = 4, refine: bool = True,
              gate: float = 0.05, strict: bool = True) -> LProfile:
    """``L+-(t, w)`` by Filon quadrature in ``s`` over ``[0, nyquist]``.

    The integrand is tapered to zero over the last ``taper`` fraction of the
    band so that truncation adds no slowly decaying tail.  ``t`` covers one
    period ``[-pi/ds, pi/ds)`` of the discrete sum; beyond it ``|L|`` is
    extrapolated as ``c / t^2``.  With ``refine`` the totals are recomputed at
    ``ds/2`` and their relative change is the error estimate.
    """
    dirs = dirs or sphere_quadrature(10)
    g = V.grid
    ds = ds or g.nyquist / 320
    if V.is_zero():
        t = np.linspace(-np.pi / ds, np.pi / ds, 9)
        z = np.zeros((len(dirs), len(t)), complex)
        return LProfile(dirs, t, z, z.copy(), 0.0, 0.0, np.zeros((len(dirs), 2)), 0.0, 0.0,
                        ds, g.nyquist)
    sampler = V.spectrum
    t, Lp, Lm, l1p, l1m, tp, tmt = _profile(V, dirs, ds, M, taper, sampler)
    tot_p, tot_m = float(dirs.integrate(l1p)), float(dirs.integrate(l1m))
    err = 0.0
    if refine:
        _, _, _, r1p, r1m, _, _ = _profile(V, dirs, ds / 2, 2 * M if M else None, taper, sampler)
        rp, rm = float(dirs.integrate(r1p)), float(dirs.integrate(r1m))
        err = max(abs(rp - tot_p) / max(rp, 1e-300), abs(rm - tot_m) / max(rm, 1e-300))
        if err > gate:
            msg = f"L-profile s-grid under-resolved: refinement change {err:.3g} > {gate}"
            if strict:
                raise UnderResolved(msg)
            log.warning(msg)
    tail = float(max(dirs.integrate(tp), dirs.integrate(tmt)))
    sl = slice(None, None, stride)
    return LProfile(dirs, t[sl], Lp[:, sl], Lm[:, sl], tot_p, tot_m,
                    np.stack([l1p, l1m], axis=1), err, tail, ds, g.nyquist)


@dataclass
class EstimResult:
    ratio: float
    total: float
    norm: float
    error_estimate: float

    def row(self) -> dict:
        return {"ratio": self.ratio, "total": self.total, "norm": self.norm,
                "error_estimate": self.error_estimate}


def estim_ratio(V: Potential, dirs: DirectionSet | None = None, **kw) -> EstimResult:
    """``iint |L+-| dt dw`` divided by the ``sigma = 1/2`` dyadic shell norm of ``V``."""
    nrm = dyadic_shell_norm(V, 0.5, upsample=2).value
    if nrm == 0:
        raise ValueError("estim_ratio needs a nonzero potential")
    prof = profile_L(V, dirs, **kw)
    tot = max(prof.total_plus, prof.total_minus)
    return EstimResult(tot / nrm, tot, nrm, prof.error_estimate)


# --------------------------------------------------------------------------
# K and its half-space decomposition


def _ray_integrand(V, omega, s, taper, sampler=None):
    w = np.asarray(omega, float)
    return _ray_samples(V, w[None, :], s, sampler)[0] * s * _taper(s, s[-1], taper)


def kernel_K(V: Potential, x, t: float, omega, ds: float | None = None, taper: float = 0.15,
             sampler=None) -> complex:
    """Direct Filon quadrature of ``1/2 int_0^inf V^(s w) exp(-i t s/2) exp(i s w.x) s ds``."""
    if V.is_zero():
        return 0j
    g = V.grid
    ds = ds or g.nyquist / 320
    s = ds * np.arange(int(np.floor(g.nyquist / ds)) + 1)
    gs = _ray_integrand(V, omega, s, taper, sampler)
    tau = 0.5 * t - float(np.dot(x, omega))
    return complex(0.5 * filon_sum(gs, ds, np.array(tau)))


@dataclass
class DecompositionReport:
    max_deviation: float
    time_scale: float
    samples: int
    excluded: int


def _random_unit(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _decomposition_samples(V, samples, seed, radius=3.0, t_max=8.0):
    rng = np.random.default_rng(seed)
    om = _random_unit(rng, samples)
    x = _random_unit(rng, samples) * radius * rng.uniform(0, 1, (samples, 1)) ** (1 / 3)
    t = rng.uniform(0, t_max, samples)
    h = V.grid.h
    a = np.einsum("ij,ij->i", x, om)
    keep = np.abs(a - t / 2) > h
    return x[keep], t[keep], om[keep], int((~keep).sum())


def _decomposition_terms(V, x, t, om, c, prof_p: LProfile):
    """Right-hand side ``1/2 chi L+((t - 2x.w) w) + 1/2 chi L-((t - 2x.w) w)`` read in polar form."""
    out = np.empty(len(t), complex)
    n = len(t)
    for i in range(n):
        y = t[i] - 2 * float(x[i] @ om[i])
        r = c * abs(y)
        if y > 0:  # polar point (r, w): L+(r, w)
            out[i] = 0.5 * prof_p.at(r, i, "plus")
        else:  # polar point (r, -w): L-(r, -w); direction -w is stored at index n + i
            out[i] = 0.5 * prof_p.at(r, n + i, "minus")
    return out


def _decomposition_deviation(V, x, t, om, c, prof, lhs):
    rhs = _decomposition_terms(V, x, t, om, c, prof)
    return float(np.max(np.abs(rhs - lhs)) / max(np.max(np.abs(lhs)), 1e-300))


def _decomposition_setup(V, samples, seed):
    x, t, om, excl = _decomposition_samples(V, samples, seed)
    dirs = DirectionSet(np.vstack([om, -om]), np.ones(2 * len(om)))
    prof = profile_L(V, dirs, refine=False, stride=1)
    sampler = V.spectrum
    lhs = np.array([kernel_K(V, x[i], t[i], om[i], sampler=sampler) for i in range(len(t))])
    return x, t, om, excl, prof, lhs


@dataclass
class CalibrationResult:
    time_scale: float
    deviation: float


def calibration_potential() -> Potential:
    g = make_grid(32, 8.0)
    return sample(Gaussian(-1.0, 1.0), g, label="calibration")


def calibrate_time_convention(V: Potential | None = None, samples: int = 40,
                              seed: int = 0) -> CalibrationResult:
    """Fit the scale ``c`` in ``L+-(c |t - 2x.w|, +-w)`` that best reproduces ``K``."""
    V = V if V is not None else calibration_potential()
    x, t, om, _, prof, lhs = _decomposition_setup(V, samples, seed)

    def dev(c):
        return _decomposition_deviation(V, x, t, om, c, prof, lhs)

    grid = np.linspace(0.1, 2.0, 39)
    vals = [dev(c) for c in grid]
    c0 = grid[int(np.argmin(vals))]
    res = optimize.minimize_scalar(dev, bounds=(max(0.05, c0 - 0.05), c0 + 0.05),
                                   method="bounded", options={"xatol": 1e-6})
    return CalibrationResult(float(res.x), float(res.fun))


@lru_cache(maxsize=1)
def calibrated_time_scale() -> float:
    """Time scale frozen from the calibration potential (computed once per process)."""
    return calibrate_time_convention().time_scale


def decomposition_check(V: Potential, samples: int = 100, time_scale: float | None = None,
                        seed: int = 1) -> DecompositionReport:
    """Max relative deviation between ``K`` and its half-space decomposition."""
    c = calibrated_time_scale() if time_scale is None else time_scale
    if V.is_zero():
        return DecompositionReport(0.0, c, 0, 0)
    x, t, om, excl, prof, lhs = _decomposition_setup(V, samples, seed)
    return DecompositionReport(_decomposition_deviation(V, x, t, om, c, prof, lhs), c,
                               len(t), excl)


# --------------------------------------------------------------------------
# derivative kernel and Hardy step


def _radial_derivative_field(V: Potential) -> Field3:
    """``xi^ . grad_xi V^`` on the grid, with ``grad_xi V^ = F(-i x V)``."""
    g = V.grid
    kr = g.freq_radius
    kx = g.freq_coords
    out = np.zeros(g.shape, complex)
    for i, xi in enumerate(g.coords):
        comp = fourier(Field3(g, (-1j * xi * V.values).astype(complex))).values
        out += np.divide(kx[i], kr, out=np.zeros(g.shape), where=kr > 0) * comp
    return Field3(g, out, FREQUENCY)


def dt_kernel_bound(Vdot: Potential, eps: float = 0.5, samples: int = 40, seed: int = 2,
                    ds: float | None = None, tol: float = 1e-2) -> NormReport:
    """Integrated-by-parts form of the kernel of ``dV/dt`` and its controlling norm.

    Checks, on random ``(x, t, w)`` with ``|x.w| >= eps``,
    ``1/2 int V^ e s e^(isx.w) ds = -1/(2 i x.w) int (d_s V^ s - (it/2) V^ s + V^) e e^(isx.w) ds``
    with ``e = exp(-i t s/2)``, and returns
    ``|| d_s V^(s w) + V^(s w) ||`` in the ``sigma = 1/2`` dyadic shell norm.
    """
    g = Vdot.grid
    if Vdot.is_zero():
        return NormReport(0.0, 0.0, "dt_kernel", {"identity_deviation": 0.0})
    ds = ds or g.nyquist / 320
    s = ds * np.arange(int(np.floor(g.nyquist / ds)) + 1)
    samp = Vdot.spectrum
    moments = [SpectrumSampler(Potential(g, xi * Vdot.values)) for xi in g.coords]
    rng = np.random.default_rng(seed)
    dev, scale, used = 0.0, 0.0, 0
    edge = 0.0
    while used < samples:
        om = _random_unit(rng, 1)[0]
        x = _random_unit(rng, 1)[0] * rng.uniform(eps, 4.0)
        a = float(x @ om)
        if abs(a) < eps:
            continue
        t = rng.uniform(0, 8)
        xi = s[:, None] * om[None, :]
        Vh = samp(xi)
        dVh = -1j * sum(om[j] * moments[j](xi) for j in range(3))
        edge = max(edge, abs(Vh[-1]) / max(np.abs(Vh).max(), 1e-300))
        tau = 0.5 * t - a
        direct = 0.5 * filon_sum(Vh * s, ds, np.array(tau))
        integrand = dVh * s - 0.5j * t * Vh * s + Vh
        ibp = -1.0 / (2j * a) * filon_sum(integrand, ds, np.array(tau))
        dev = max(dev, abs(direct - ibp))
        scale = max(scale, abs(direct))
        used += 1
    rel = dev / max(scale, 1e-300)
    if edge > 1e-6:
        log.warning("dt_kernel_bound: V^ is %.2g of its peak at the band edge", edge)
    if rel > tol:
        raise UnderResolved(f"integration-by-parts identity off by {rel:.3g} > {tol}")
    G = Field3(g, _radial_derivative_field(Vdot).values + fourier(Vdot.as_field()).values, FREQUENCY)
    rep = dyadic_shell_norm(inverse_fourier(G), 0.5)
    return NormReport(rep.value, rep.truncation_tail, "dt_kernel",
                      {"identity_deviation": rel, "samples": samples, "eps": eps})


def besov_1d(h: np.ndarray, ds: float, sigma: float = 0.5) -> float:
    """Homogeneous ``B^sigma_{2,1}`` surrogate of an even function sampled at ``s = j ds, j >= 0``.

    Sums ``2^(j sigma) || h~ chi_{2^j <= |tau| < 2^(j+1)} ||_2`` over dyadic
    shells of the dual variable.  Shells narrower than a few transform bins
    use ``|h~(tau)| ~ |h~(0)|``, which sums in closed form.
    """
    full = np.concatenate([h[:0:-1], h])  # even extension on [-S, S]
    n = len(full)
    m = 1 << int(np.ceil(np.log2(256 * n)))
    buf = np.zeros(m, complex)
    buf[:n] = full
    H = np.fft.fft(buf) * ds / np.sqrt(2 * np.pi)
    tau = np.abs(2 * np.pi * np.fft.fftfreq(m, d=ds))
    dtau = 2 * np.pi / (m * ds)
    j0 = int(np.ceil(np.log2(64 * dtau)))
    sel = tau >= 2.0 ** j0
    j = np.floor(np.log2(tau[sel])).astype(int)
    mass = np.bincount(j - j0, weights=np.abs(H[sel]) ** 2 * dtau)
    jj = np.arange(j0, j0 + len(mass))
    resolved = np.sum(2.0 ** (jj * sigma) * np.sqrt(mass))
    e = sigma + 0.5
    low = abs(H[0]) * np.sqrt(2.0) * 2.0 ** (j0 * e) / (2.0 ** e - 1)
    return float(resolved + low)


@dataclass
class HardyResult:
    ratio: float
    numerator: float
    denominator: float


def hardy_ratio(V, s_max: float = 40.0, ds: float = 0.005, dirs: DirectionSet | None = None,
                mean_width: float = 1.0) -> HardyResult:
    """``||V^/s|| / ||d_s V^||`` for dyadic shell norms in the radial frequency variable.

    ``V`` is either a radial frequency profile ``s -> V^(s)`` or a gridded
    :class:`Potential`; a potential is first made mean-free by subtracting a
    Gaussian of width ``mean_width`` carrying its integral, and the two norms
    are integrated over ``dirs``.
    """
    if isinstance(V, Potential):
        g = V.grid
        mass = V.values.sum() * g.cell
        bump = sample(Gaussian(1.0, mean_width), g).values
        W = Potential(g, V.values - mass * bump / (bump.sum() * g.cell))
        dirs = dirs or sphere_quadrature(8)
        s = np.linspace(0.0, g.nyquist, 1025)
        dss = s[1] - s[0]
        Vh = _ray_samples(W, dirs.directions, s) * _taper(s, s[-1], 0.15)[None, :]
        num, den = [], []
        for r in Vh:
            dr = np.gradient(r, dss, edge_order=2)
            q = np.empty_like(r)
            q[1:] = r[1:] / s[1:]
            q[0] = dr[0]
            num.append(besov_1d(q, dss))
            den.append(besov_1d(dr, dss))
        N, D = float(dirs.integrate(np.array(num))), float(dirs.integrate(np.array(den)))
    else:
        s = np.arange(0.0, s_max + ds / 2, ds)
        v = np.asarray(V(s), complex)
        eps_fd = 1e-6
        dv = (np.asarray(V(s + eps_fd), complex) - np.asarray(V(np.abs(s - eps_fd)), complex)) / (2 * eps_fd)
        dv[0] = (np.asarray(V(np.array([eps_fd])), complex)[0] - v[0]) / eps_fd
        q = np.empty_like(v)
        q[1:] = v[1:] / s[1:]
        q[0] = dv[0]
        N, D = besov_1d(q, ds), besov_1d(dv, ds)
    if D == 0:
        raise ValueError("zero denominator in hardy_ratio")
    return HardyResult(N / D, N, D)


# --------------------------------------------------------------------------
# weighted decay


@dataclass
class WeightedDecayTable:
    eps: float
    x_samples: np.ndarray
    ratios: np.ndarray
    blocks: np.ndarray  # t-block index j, t in [2^j, 2^(j+1))
    block_sup: np.ndarray  # max over x of trailing-side weighted block contribution / norm
    cumulative: np.ndarray
    r2: float
    slope: float
    norm: float

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.ratios)) and np.all(np.isfinite(self.block_sup)))

    def to_csv(self, fh=None) -> str:
        out = io.StringIO() if fh is None else fh
        w = csv.writer(out)
        w.writerow(["kind", "index", "x0", "x1", "x2", "value"])
        for i, (x, r) in enumerate(zip(self.x_samples, self.ratios)):
            w.writerow(["ratio", i, *x, r])
        for j, b, c in zip(self.blocks, self.block_sup, self.cumulative):
            w.writerow(["block", int(j), "", "", "", b])
            w.writerow(["cumulative", int(j), "", "", "", c])
        return out.getvalue() if fh is None else ""


def _linear_r2(x, y):
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    fit = A @ coef
    ss_res = np.sum((y - fit) ** 2)
    ss_tot = np.sum((y - y.mean()) ** 2)
    return (1 - ss_res / ss_tot if ss_tot > 0 else 1.0), float(coef[0])


def weighted_decay_check(V: Potential, eps: float, x_samples, dirs: DirectionSet | None = None,
                         blocks=range(0, 7), profile: LProfile | None = None) -> WeightedDecayTable:
    """Weighted ``L1_{t,w}`` norms of ``I(x, t, w) = int_0^inf V^(s w) e^(-its/2) e^(isw.x) s ds``.

    For each ``x`` the ratio is
    ``int_w |x.w|^(1-eps) int_0^inf |I| dt dw / ||V||_(sigma = 3/2 - eps)``.
    Per dyadic block ``t in [2^j, 2^(j+1))`` the same quantity is restricted
    to the trailing half-space ``x.w < 0`` and maximised over ``x``; at
    ``eps = 0`` these block maxima stay of unit size, so their cumulative
    sum grows linearly in the block count.
    """
    if not 0 <= eps <= 1:
        raise ValueError("eps must lie in [0, 1]")
    xs = np.atleast_2d(np.asarray(x_samples, float))
    dirs = dirs or sphere_quadrature(16)
    nrm = dyadic_shell_norm(V, 1.5 - eps).value
    if nrm == 0:
        raise ValueError("zero potential")
    ds = V.grid.nyquist / 640
    if profile is not None:
        t, Lp = profile.t, profile.plus
    else:
        t, Lp = _l_plus_fft(V, dirs.directions, ds, None, 0.15)
        order = np.argsort(t)
        t, Lp = t[order], Lp[:, order]
    absL = np.abs(Lp)
    cum = cumulative_trapezoid(absL, t, axis=1, initial=0.0)
    c_tail = absL[:, -1] * t[-1] ** 2
    step = t[1] - t[0]

    def cum_at(v):
        u = np.clip((v - t[0]) / step, 0, len(t) - 1)
        i0 = np.minimum(np.floor(u).astype(int), len(t) - 2)
        fr = u - i0
        r = np.arange(cum.shape[0])
        return cum[r, i0] * (1 - fr) + cum[r, i0 + 1] * fr

    def integral(lo, hi):
        # int_lo^hi |L+(tau, w)| dtau per direction, c / tau^2 beyond the grid
        val = cum_at(hi) - cum_at(lo)
        top = t[-1]
        inv_hi = np.where(np.isfinite(hi), 1.0 / np.maximum(hi, top), 0.0)
        return val + np.where(hi > top, c_tail * (1.0 / np.maximum(lo, top) - inv_hi), 0.0)

    om = dirs.directions
    wts = dirs.weights
    ratios = np.empty(len(xs))
    blocks = np.asarray(list(blocks))
    per_x_blocks = np.zeros((len(xs), len(blocks)))
    for k, x in enumerate(xs):
        a = om @ x
        wgt = np.abs(a) ** (1 - eps) if eps < 1 else np.ones_like(a)
        full = 2 * integral(-a, np.full_like(a, np.inf))
        ratios[k] = float(np.sum(wts * wgt * full)) / nrm
        trailing = a < 0
        for b, j in enumerate(blocks):
            lo, hi = 2.0 ** (j - 1), 2.0 ** j
            contrib = np.where(trailing, 2 * integral(lo - a, hi - a), 0.0)
            per_x_blocks[k, b] = float(np.sum(wts * wgt * contrib)) / nrm
    sup = per_x_blocks.max(axis=0)
    cumul = np.cumsum(sup)
    r2, slope = _linear_r2(blocks.astype(float), cumul)
    return WeightedDecayTable(eps, xs, ratios, blocks, sup, cumul, r2, slope, nrm)


def dyadic_x_samples(j_range=range(-1, 7), direction=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Points ``2^j direction``: one per dyadic scale, as the block maxima need."""
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    return np.array([2.0 ** j * d for j in j_range])


# --------------------------------------------------------------------------
# half-space truncation


def halfspace_truncate(V: Potential, omega0, t0: float) -> Potential:
    """``chi_{x.w0 >= t0} V`` with a sharp indicator on the grid nodes."""
    w = np.asarray(omega0, float)
    nw = np.linalg.norm(w)
    if nw == 0:
        raise ValueError("omega0 must be nonzero")
    mask = V.grid.dot(w / nw) >= t0
    return Potential(V.grid, np.where(mask, V.values, 0.0), V.label)
