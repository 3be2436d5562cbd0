"""Grids, fields, transforms and sphere quadrature.

Everything lives on a cubic periodic grid centred at the origin, with
physical coordinates ``x_j = -L + j h`` and ``h = 2L/n``.  Frequency-side
arrays are stored in FFT order (``numpy.fft.fftfreq`` layout).

The Fourier transform is the unitary one,

    f^(xi) = (2 pi)^(-3/2) \\int f(x) exp(-i x.xi) dx,

discretised with the cell measure ``h^3`` on the physical side and
``(pi/L)^3`` on the frequency side, so the discrete transform is an exact
isometry between the two weighted l^2 spaces.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft
from scipy import ndimage

PHYSICAL = "physical"
FREQUENCY = "frequency"

_TWO_PI_32 = (2.0 * np.pi) ** 1.5


def fftn(a: np.ndarray) -> np.ndarray:
    return sfft.fftn(a, workers=-1)


def ifftn(a: np.ndarray) -> np.ndarray:
    return sfft.ifftn(a, workers=-1)


def rfftn(a: np.ndarray) -> np.ndarray:
    return sfft.rfftn(a, workers=-1)


def irfftn(a: np.ndarray, shape) -> np.ndarray:
    return sfft.irfftn(a, s=shape, workers=-1)


@dataclass(frozen=True)
class Grid3:
    """Uniform periodic cubic grid on ``[-L, L)^3`` with ``n`` points per axis."""

    n: int
    L: float

    def __post_init__(self):
        n = self.n
        if not isinstance(n, (int, np.integer)) or n < 8 or n & (n - 1):
            raise ValueError(f"grid size must be a power of two >= 8, got {n!r}")
        if not np.isfinite(self.L) or self.L <= 0:
            raise ValueError(f"grid half-width must be positive, got {self.L!r}")

    @property
    def h(self) -> float:
        return 2.0 * self.L / self.n

    @property
    def dk(self) -> float:
        """Frequency spacing ``2 pi / (2L)``."""
        return np.pi / self.L

    @property
    def cell(self) -> float:
        return self.h ** 3

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.n)

    @property
    def nyquist(self) -> float:
        return np.pi / self.h

    @cached_property
    def axis(self) -> np.ndarray:
        return -self.L + self.h * np.arange(self.n)

    @cached_property
    def freq_axis(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.h)

    @cached_property
    def coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        a = self.axis
        return (a[:, None, None], a[None, :, None], a[None, None, :])

    @cached_property
    def radius(self) -> np.ndarray:
        x, y, z = self.coords
        return np.sqrt(x * x + y * y + z * z)

    @cached_property
    def freq_coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = self.freq_axis
        return (k[:, None, None], k[None, :, None], k[None, None, :])

    @cached_property
    def xi2(self) -> np.ndarray:
        kx, ky, kz = self.freq_coords
        return kx * kx + ky * ky + kz * kz

    @cached_property
    def freq_radius(self) -> np.ndarray:
        return np.sqrt(self.xi2)

    @cached_property
    def _sign(self) -> np.ndarray:
        # exp(i xi_k L) = (-1)^k for the centred grid
        s = _alt(self.n)
        return s[:, None, None] * s[None, :, None] * s[None, None, :]

    def dot(self, omega: Sequence[float]) -> np.ndarray:
        """Array of ``x . omega`` over the grid."""
        x, y, z = self.coords
        return omega[0] * x + omega[1] * y + omega[2] * z


def _alt(n: int) -> np.ndarray:
    # (-1)^k where k is the signed integer frequency index in FFT order
    k = np.rint(np.fft.fftfreq(n) * n).astype(int)
    return np.where(k % 2 == 0, 1.0, -1.0)


def make_grid(n: int, L: float) -> Grid3:
    """Cubic centred grid with ``n`` points per axis on ``[-L, L)``."""
    return Grid3(int(n), float(L))


@dataclass(frozen=True)
class Field3:
    """Complex scalar field on a grid, either physical- or frequency-side."""

    grid: Grid3
    values: np.ndarray
    side: str = PHYSICAL

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.shape != self.grid.shape:
            raise ValueError(f"field shape {v.shape} does not match grid {self.grid.shape}")
        if self.side not in (PHYSICAL, FREQUENCY):
            raise ValueError(f"unknown side {self.side!r}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def measure(self) -> float:
        return self.grid.cell if self.side == PHYSICAL else self.grid.dk ** 3

    def norm(self) -> float:
        return float(np.sqrt(self.measure * np.sum(np.abs(self.values) ** 2)))

    def inner(self, other: "Field3") -> complex:
        """``<self, other>``, conjugate-linear in ``self``."""
        _check_same(self, other)
        return complex(self.measure * np.vdot(self.values, other.values))

    def __add__(self, other: "Field3") -> "Field3":
        _check_same(self, other)
        return Field3(self.grid, self.values + other.values, self.side)

    def __sub__(self, other: "Field3") -> "Field3":
        _check_same(self, other)
        return Field3(self.grid, self.values - other.values, self.side)

    def __mul__(self, c) -> "Field3":
        return Field3(self.grid, self.values * c, self.side)

    __rmul__ = __mul__


def _check_same(a: Field3, b: Field3) -> None:
    if a.grid != b.grid:
        raise ValueError("fields live on different grids")
    if a.side != b.side:
        raise ValueError("fields live on different sides of the transform")


def zeros(grid: Grid3, side: str = PHYSICAL) -> Field3:
    return Field3(grid, np.zeros(grid.shape, complex), side)


def fourier(f: Field3) -> Field3:
    """Unitary Fourier transform, physical -> frequency."""
    if f.side != PHYSICAL:
        raise ValueError("fourier expects a physical-side field")
    g = f.grid
    vals = fftn(f.values) * (g._sign * (g.cell / _TWO_PI_32))
    return Field3(g, vals, FREQUENCY)


def inverse_fourier(f: Field3) -> Field3:
    """Inverse unitary Fourier transform, frequency -> physical."""
    if f.side != FREQUENCY:
        raise ValueError("inverse_fourier expects a frequency-side field")
    g = f.grid
    scale = g.dk ** 3 * g.n ** 3 / _TWO_PI_32
    vals = ifftn(f.values * g._sign) * scale
    return Field3(g, vals, PHYSICAL)


def apply_multiplier(f: Field3, symbol: np.ndarray) -> Field3:
    """Apply the Fourier multiplier ``symbol(xi)`` to a physical-side field."""
    if f.side != PHYSICAL:
        raise ValueError("multipliers act on physical-side fields")
    return Field3(f.grid, ifftn(fftn(f.values) * symbol), PHYSICAL)


# --------------------------------------------------------------------------
# potentials and analytic profiles


@dataclass(frozen=True)
class Potential:
    """Real potential sampled on a grid."""

    grid: Grid3
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != self.grid.shape:
            raise ValueError(f"potential shape {v.shape} does not match grid {self.grid.shape}")
        if np.iscomplexobj(v):
            if np.max(np.abs(v.imag), initial=0.0) > 0:
                raise ValueError("potential must be real")
            v = v.real
        v = np.asarray(v, dtype=float)
        if not np.all(np.isfinite(v)):
            raise ValueError("potential values must be finite")
        object.__setattr__(self, "values", v)

    def __mul__(self, c: float) -> "Potential":
        return Potential(self.grid, self.values * float(c), self.label)

    __rmul__ = __mul__

    def __add__(self, other: "Potential") -> "Potential":
        if other.grid != self.grid:
            raise ValueError("potentials live on different grids")
        return Potential(self.grid, self.values + other.values, self.label)

    def as_field(self) -> Field3:
        return Field3(self.grid, self.values.astype(complex))

    @property
    def sup(self) -> float:
        return float(np.max(np.abs(self.values), initial=0.0))

    def is_zero(self) -> bool:
        return not np.any(self.values)

    @cached_property
    def spectrum(self) -> "SpectrumSampler":
        return SpectrumSampler(self)


class Profile:
    """Analytic real function on R^3 with an analytic gradient."""

    smooth = True

    def __call__(self, x, y, z) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, x, y, z):
        raise NotImplementedError


@dataclass(frozen=True)
class Gaussian(Profile):
    amplitude: float = 1.0
    width: float = 1.0
    center: tuple = (0.0, 0.0, 0.0)

    def __call__(self, x, y, z):
        c = self.center
        r2 = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2
        return self.amplitude * np.exp(-r2 / (2 * self.width ** 2))

    def gradient(self, x, y, z):
        c = self.center
        v = self(x, y, z)
        w2 = self.width ** 2
        return (-(x - c[0]) / w2 * v, -(y - c[1]) / w2 * v, -(z - c[2]) / w2 * v)


@dataclass(frozen=True)
class SmoothWell(Profile):
    """``-depth`` inside radius ``radius``, tanh edge of width ``edge``."""

    depth: float = 1.0
    radius: float = 1.0
    edge: float = 0.3

    def __call__(self, x, y, z):
        r = np.sqrt(x * x + y * y + z * z)
        return -0.5 * self.depth * (1.0 - np.tanh((r - self.radius) / self.edge))

    def gradient(self, x, y, z):
        r = np.sqrt(x * x + y * y + z * z)
        dv = 0.5 * self.depth / self.edge / np.cosh((r - self.radius) / self.edge) ** 2
        with np.errstate(invalid="ignore", divide="ignore"):
            q = np.where(r > 0, dv / np.where(r > 0, r, 1.0), 0.0)
        return (q * x, q * y, q * z)


@dataclass(frozen=True)
class ShellIndicator(Profile):
    """``amplitude`` on ``r_in <= |x| < r_out``."""

    amplitude: float = 1.0
    r_in: float = 1.0
    r_out: float = 2.0
    smooth = False

    def __call__(self, x, y, z):
        r = np.sqrt(x * x + y * y + z * z)
        return np.where((r >= self.r_in) & (r < self.r_out), float(self.amplitude), 0.0)

    def gradient(self, x, y, z):
        raise ValueError("indicator profiles have no pointwise gradient")


def ball(amplitude: float = 1.0, radius: float = 1.0) -> ShellIndicator:
    return ShellIndicator(amplitude, 0.0, radius)


@dataclass(frozen=True)
class Mixture(Profile):
    parts: tuple = ()

    @property
    def smooth(self):
        return all(p.smooth for p in self.parts)

    def __call__(self, x, y, z):
        out = 0.0
        for p in self.parts:
            out = out + p(x, y, z)
        return np.broadcast_to(out, np.broadcast(x, y, z).shape) * 1.0

    def gradient(self, x, y, z):
        gx = gy = gz = 0.0
        for p in self.parts:
            a, b, c = p.gradient(x, y, z)
            gx, gy, gz = gx + a, gy + b, gz + c
        return gx, gy, gz


def random_bandlimited(seed: int, count: int = 3, scale: float = 1.0) -> Mixture:
    """Seeded sum of Gaussians with widths in [1.2, 2] and centres within 3.

    Widths are bounded below so the profile is resolved (spectrally negligible
    beyond |xi| = pi) on grids with spacing up to 1.
    """
    rng = np.random.default_rng(seed)
    parts = []
    for _ in range(count):
        c = rng.uniform(-3.0, 3.0, size=3)
        parts.append(Gaussian(scale * rng.uniform(-1.0, 1.0), rng.uniform(1.2, 2.0), tuple(c)))
    return Mixture(tuple(parts))


def sample(profile: Callable, grid: Grid3, supersample: int = 1, label: str = "") -> Potential:
    """Sample a profile on the grid, optionally cell-averaged on ``s^3`` sub-points."""
    if supersample <= 1:
        x, y, z = grid.coords
        vals = np.broadcast_to(profile(x, y, z), grid.shape)
        return Potential(grid, np.array(vals, float), label)
    s = int(supersample)
    offs = (np.arange(s) + 0.5) / s - 0.5
    acc = np.zeros(grid.shape)
    x, y, z = grid.coords
    for a in offs:
        for b in offs:
            for c in offs:
                acc += profile(x + a * grid.h, y + b * grid.h, z + c * grid.h)
    return Potential(grid, acc / s ** 3, label)


def sample_field(profile: Callable, grid: Grid3) -> Field3:
    x, y, z = grid.coords
    return Field3(grid, np.broadcast_to(profile(x, y, z), grid.shape))


def gaussian_packet(grid: Grid3, width: float = 1.0, center=(0.0, 0.0, 0.0),
                    momentum=(0.0, 0.0, 0.0), normalize: bool = False) -> Field3:
    """``exp(-|x-c|^2/(2 w^2) + i k.x)``."""
    x, y, z = grid.coords
    c, k = center, momentum
    r2 = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2
    v = np.exp(-r2 / (2 * width ** 2) + 1j * (k[0] * x + k[1] * y + k[2] * z))
    f = Field3(grid, v)
    return f * (1.0 / f.norm()) if normalize else f


def random_field(grid: Grid3, rng: np.random.Generator, band: float | None = None,
                 envelope: float | None = None) -> Field3:
    """Random complex field; optionally band-limited to ``|xi| <= band`` and
    multiplied by a Gaussian envelope of width ``envelope``."""
    v = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    if band is not None:
        v = ifftn(fftn(v) * (grid.freq_radius <= band))
    if envelope is not None:
        v = v * np.exp(-grid.radius ** 2 / (2 * envelope ** 2))
    return Field3(grid, v)


# --------------------------------------------------------------------------
# sphere quadrature


@dataclass(frozen=True)
class DirectionSet:
    directions: np.ndarray
    weights: np.ndarray
    degree: int = 0

    def __post_init__(self):
        d = np.asarray(self.directions, float).reshape(-1, 3)
        w = np.asarray(self.weights, float).ravel()
        if len(d) != len(w):
            raise ValueError("direction and weight counts differ")
        if np.any(np.abs(np.linalg.norm(d, axis=1) - 1) > 1e-12):
            raise ValueError("directions must be unit vectors")
        if np.any(w <= 0):
            raise ValueError("quadrature weights must be positive")
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.weights)

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Integrate samples over S^2; leading axis indexes directions."""
        values = np.asarray(values)
        return np.tensordot(self.weights, values, axes=(0, 0))


def sphere_quadrature(order: int) -> DirectionSet:
    """Gauss-Legendre x trapezoid product rule exact for harmonics of degree <= order.

    Uses ``order // 2 + 1`` nodes in ``cos(theta)`` and twice that many
    equispaced azimuths, so the set is symmetric under ``omega -> -omega``.
    """
    if order < 6:
        raise ValueError(f"sphere quadrature order must be >= 6, got {order}")
    nt = order // 2 + 1
    nphi = 2 * nt
    u, wu = np.polynomial.legendre.leggauss(nt)
    phi = 2 * np.pi * np.arange(nphi) / nphi
    st = np.sqrt(1 - u ** 2)
    dirs = np.stack(
        [np.outer(st, np.cos(phi)), np.outer(st, np.sin(phi)), np.outer(u, np.ones(nphi))],
        axis=-1,
    ).reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    w = np.outer(wu, np.full(nphi, 2 * np.pi / nphi)).ravel()
    return DirectionSet(dirs, w, degree=2 * nt - 1)


def orthonormal_frame(omega) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-handed frame ``(u, v, omega)``; the identity frame for ``omega = e3``."""
    w = np.asarray(omega, float)
    w = w / np.linalg.norm(w)
    if abs(w[2]) > 1 - 1e-15 and w[2] > 0:
        return np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0])
    a = np.array([0.0, 0.0, 1.0]) if abs(w[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(a, w)
    u /= np.linalg.norm(u)
    v = np.cross(w, u)
    return u, v, w


# --------------------------------------------------------------------------
# V^ along frequency lines


class SpectrumSampler:
    """Samples the continuous transform of a gridded potential off the lattice.

    The transform of the cell-sampled potential is a trigonometric sum that is
    periodic with period ``2 pi / h``; it is tabulated on a ``pad``-times finer
    frequency lattice (zero padding) and interpolated with cubic splines.
    """

    def __init__(self, V: Potential, pad: int = 3):
        self.V = V
        self.pad = pad
        g = V.grid
        m = pad * g.n
        big = np.zeros((m, m, m))
        lo = (m - g.n) // 2
        big[lo:lo + g.n, lo:lo + g.n, lo:lo + g.n] = V.values
        sign = _alt(m)
        spec = fftn(big) * (sign[:, None, None] * sign[None, :, None] * sign[None, None, :])
        spec *= g.cell / _TWO_PI_32
        spec = np.fft.fftshift(spec)
        self._m = m
        self._dk = np.pi / (pad * g.L)
        self._re = ndimage.spline_filter(spec.real, order=3, mode="grid-wrap")
        self._im = ndimage.spline_filter(spec.imag, order=3, mode="grid-wrap")

    def __call__(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, float)
        shp = xi.shape[:-1]
        pts = xi.reshape(-1, 3).T / self._dk + self._m // 2
        re = ndimage.map_coordinates(self._re, pts, order=3, mode="grid-wrap", prefilter=False)
        im = ndimage.map_coordinates(self._im, pts, order=3, mode="grid-wrap", prefilter=False)
        return (re + 1j * im).reshape(shp)


def direct_transform(V: Potential, xi: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Plane-wave quadrature ``(2 pi)^(-3/2) h^3 sum_j V(x_j) exp(-i xi.x_j)``
    over the nonzero cells of ``V``."""
    g = V.grid
    idx = np.nonzero(V.values)
    vals = V.values[idx]
    a = g.axis
    pos = np.stack([a[idx[0]], a[idx[1]], a[idx[2]]], axis=1)
    xi = np.asarray(xi, float)
    shp = xi.shape[:-1]
    flat = xi.reshape(-1, 3)
    out = np.empty(len(flat), complex)
    for i in range(0, len(flat), chunk):
        ph = flat[i:i + chunk] @ pos.T
        out[i:i + chunk] = np.exp(-1j * ph) @ vals
    return (out * (g.cell / _TWO_PI_32)).reshape(shp)


def frequency_line(V: Potential, omega, s_grid, method: str = "interp") -> np.ndarray:
    """Samples of ``V^(s omega)`` for ``s`` in ``s_grid``."""
    s = np.asarray(s_grid, float)
    w = np.asarray(omega, float)
    if abs(np.linalg.norm(w) - 1) > 1e-12:
        raise ValueError("omega must be a unit vector")
    if s.size and np.max(np.abs(s)) > V.grid.nyquist * (1 + 1e-12):
        raise ValueError("s outside the grid's Nyquist band")
    if V.is_zero():
        return np.zeros(s.shape, complex)
    xi = s[..., None] * w
    if method == "direct":
        return direct_transform(V, xi)
    if method != "interp":
        raise ValueError(f"unknown method {method!r}")
    return V.spectrum(xi)
