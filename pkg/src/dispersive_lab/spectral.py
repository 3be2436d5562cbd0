"""Spectral analysis of H = -Laplacian + V on the periodic grid.

Bound states come from LOBPCG preconditioned by the shifted kinetic
inverse; zero-energy threshold states are detected through the
Birman-Schwinger operator ``|V|^(1/2) (-Laplacian)^(-1) |V|^(1/2) sign(V)``,
whose eigenvalue -1 signals a resonance or zero-energy eigenfunction.
"""
from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, eigs, eigsh, lobpcg

from .fields import Field3, Grid3, Potential, fftn, ifftn, irfftn, rfftn

log = logging.getLogger(__name__)

MADELUNG_SC = 2.837297479480620  # regular part of the periodic Coulomb potential, simple cubic
UNITARY_TORUS = 0.095901  # -E l^2 / (2 pi)^2 for a zero-energy resonance on a cubic torus of side l


def torus_threshold_energy(grid: Grid3) -> float:
    """Lowest torus eigenvalue of a short-range well exactly at its binding threshold.

    A well with a zero-energy resonance in R^3 does not sit at 0 on the
    periodic box of side ``l = 2L``; its lowest level is
    ``-UNITARY_TORUS (2 pi / l)^2``.  Counting levels below this value counts
    the bound states of the whole-space operator up to ``O(R/l)`` corrections.
    """
    return -UNITARY_TORUS * (np.pi / grid.L) ** 2


def apply_hamiltonian(V: Potential, f: Field3) -> Field3:
    """``-Laplacian f + V f`` with the Laplacian as the Fourier multiplier ``|xi|^2``."""
    if V.grid != f.grid:
        raise ValueError("potential and field live on different grids")
    g = f.grid
    return Field3(g, ifftn(fftn(f.values) * g.xi2) + V.values * f.values)


@dataclass
class SpectralData:
    grid: Grid3
    eigenvalues: np.ndarray
    eigenfields: list
    residuals: np.ndarray
    converged: bool = True

    def __len__(self):
        return len(self.eigenvalues)

    @property
    def count(self) -> int:
        return len(self.eigenvalues)

    def gram(self) -> np.ndarray:
        n = len(self.eigenfields)
        G = np.empty((n, n), complex)
        for i, a in enumerate(self.eigenfields):
            for j, b in enumerate(self.eigenfields):
                G[i, j] = a.inner(b)
        return G


def empty_spectrum(grid: Grid3) -> SpectralData:
    return SpectralData(grid, np.zeros(0), [], np.zeros(0))


def bound_states(V: Potential, k_max: int = 4, delta_gap: float = 1e-3, tol: float = 1e-10,
                 maxiter: int = 400, guard: int = 3, seed: int = 0, x0=None) -> SpectralData:
    """Eigenpairs of the grid Hamiltonian with energy below ``-delta_gap``.

    At most ``k_max`` pairs are returned, sorted ascending and orthonormal in
    the grid inner product.  ``x0`` may carry previous eigenfields as a warm
    start.  Non-convergence is logged and flagged, not raised.
    """
    g = V.grid
    if V.values.min() >= 0:
        return empty_spectrum(g)
    N = g.n ** 3
    xi2 = g.xi2[..., : g.n // 2 + 1]
    vals = V.values
    shift = max(1.0, -float(vals.min()))

    def matvec(X):
        X = np.asarray(X).reshape(g.n, g.n, g.n, -1)
        out = np.empty_like(X)
        for j in range(X.shape[-1]):
            x = X[..., j]
            out[..., j] = irfftn(rfftn(x) * xi2, x.shape) + vals * x
        return out.reshape(N, -1)

    def precond(X):
        X = np.asarray(X).reshape(g.n, g.n, g.n, -1)
        out = np.empty_like(X)
        for j in range(X.shape[-1]):
            out[..., j] = irfftn(rfftn(X[..., j]) / (xi2 + shift), X.shape[:3])
        return out.reshape(N, -1)

    m = k_max + guard
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, m)) * np.exp(-g.radius.ravel() ** 2 / 8)[:, None]
    if x0:
        for j, f in enumerate(x0[:m]):
            X[:, j] = np.real(f.values).ravel()
    A = LinearOperator((N, N), matvec=matvec, matmat=matvec, dtype=float)
    M = LinearOperator((N, N), matvec=precond, matmat=precond, dtype=float)
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        lam, vec = lobpcg(A, X, M=M, tol=tol, maxiter=maxiter, largest=False,
                          retLambdaHistory=False)
    order = np.argsort(lam)
    lam, vec = lam[order], vec[:, order]
    keep = lam < -delta_gap
    lam, vec = lam[keep][:k_max], vec[:, keep][:, :k_max]
    fields, res = [], []
    for j in range(len(lam)):
        v = vec[:, j].reshape(g.shape)
        v = v / np.sqrt(g.cell * np.sum(v * v))
        f = Field3(g, v)
        fields.append(f)
        res.append(apply_hamiltonian(V, f).__sub__(f * lam[j]).norm())
    res = np.asarray(res)
    ok = bool(np.all(res <= 1e-6 * np.maximum(np.abs(lam), 1e-300))) if len(lam) else True
    if not ok:
        log.warning("bound_states: residuals %s exceed 1e-6 |lambda|", res)
    return SpectralData(g, lam, fields, res, ok)


def project_continuous(spec: SpectralData, f: Field3) -> Field3:
    """``P_c f = f - sum_j <phi_j, f> phi_j``."""
    if spec.grid != f.grid:
        raise ValueError("spectral data and field live on different grids")
    out = f.values.copy()
    for phi in spec.eigenfields:
        out -= phi.inner(f) * phi.values
    return Field3(f.grid, out)


def project_bound(spec: SpectralData, f: Field3) -> Field3:
    return f - project_continuous(spec, f)


# --------------------------------------------------------------------------
# Birman-Schwinger


@dataclass
class ResonanceReport:
    bs_eigenvalues: np.ndarray
    distance_to_resonance: float
    threshold: float = 5e-2

    @property
    def resonant(self) -> bool:
        return self.distance_to_resonance < self.threshold

    @property
    def verdict(self) -> str:
        return "resonant" if self.resonant else "clear"

    @property
    def margin(self) -> float:
        return self.distance_to_resonance

    def row(self) -> dict:
        return {"verdict": self.verdict, "distance": self.distance_to_resonance,
                "threshold": self.threshold,
                "eigenvalues": " ".join(f"{m:.6g}" for m in self.bs_eigenvalues)}


class FreeGreen:
    """``(-Laplacian)^(-1)`` on R^3 restricted to a grid, via a 2x padded torus.

    The padded multiplier ``1/|xi|^2`` (zero at ``xi = 0``) yields the
    zero-mean periodic Green function, which differs from ``1/(4 pi |x|)`` by
    the constant ``-MADELUNG_SC / (4 pi l)`` (``l`` the padded period);
    the constant is added back.
    """

    def __init__(self, grid: Grid3, pad: int = 2):
        self.grid = grid
        self.pad = pad
        m = pad * grid.n
        k = 2 * np.pi * np.fft.fftfreq(m, d=grid.h)
        q2 = k[:, None, None] ** 2 + k[None, :, None] ** 2 + k[None, None, :] ** 2
        q2[0, 0, 0] = 1.0
        inv = 1.0 / q2
        inv[0, 0, 0] = 0.0
        self._inv = inv
        self._m = m
        self._const = MADELUNG_SC / (4 * np.pi * m * grid.h)

    def __call__(self, u: np.ndarray) -> np.ndarray:
        n, m = self.grid.n, self._m
        big = np.zeros((m, m, m), dtype=u.dtype)
        big[:n, :n, :n] = u
        out = ifftn(fftn(big) * self._inv)[:n, :n, :n]
        out = out + self._const * self.grid.cell * u.sum()
        return out.real if np.isrealobj(u) else out


def birman_schwinger_spectrum(V: Potential, k: int = 4, green: FreeGreen | None = None,
                              tol: float = 1e-8) -> np.ndarray:
    """Eigenvalues of the Birman-Schwinger operator with the most negative real parts."""
    g = V.grid
    supp = np.abs(V.values) > 0
    n_s = int(supp.sum())
    if n_s == 0:
        return np.zeros(0)
    G = green or FreeGreen(g)
    root = np.sqrt(np.abs(V.values[supp]))
    sgn = np.sign(V.values[supp])

    def A(u):
        full = np.zeros(g.shape)
        full[supp] = root * np.ravel(u)
        return root * G(full)[supp]

    k = min(k, n_s - 2) if n_s > 3 else n_s
    if n_s <= 3:
        M = np.column_stack([A(e) for e in np.eye(n_s)]) * sgn[None, :]
        return np.sort(np.linalg.eigvals(M).real)
    if np.all(sgn < 0) or np.all(sgn > 0):
        op = LinearOperator((n_s, n_s), matvec=A, dtype=float)
        mu = eigsh(op, k=k, which="LA", tol=tol, return_eigenvectors=False)
        return np.sort(sgn[0] * mu)
    op = LinearOperator((n_s, n_s), matvec=lambda u: A(sgn * np.ravel(u)), dtype=float)
    mu = eigs(op, k=k, which="SR", tol=tol, return_eigenvectors=False)
    return np.sort(mu.real)


def resonance_test(V: Potential, threshold: float = 5e-2, k: int = 4,
                   green: FreeGreen | None = None) -> ResonanceReport:
    """Distance of the Birman-Schwinger spectrum from -1 and the resulting verdict."""
    if V.is_zero():
        return ResonanceReport(np.zeros(0), float("inf"), threshold)
    mu = birman_schwinger_spectrum(V, k=k, green=green)
    d = float(np.min(np.abs(mu + 1))) if mu.size else float("inf")
    return ResonanceReport(mu, d, threshold)


@dataclass
class CountTimeline:
    times: np.ndarray
    counts: np.ndarray
    changes: list = field(default_factory=list)  # (time, old, new, margin)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out)
        w.writerow(["t", "count"])
        for t, c in zip(self.times, self.counts):
            w.writerow([t, int(c)])
        return out.getvalue()


def eigen_count_timeline(Vt, times, delta_gap: float | str = "threshold", k_max: int = 4,
                         threshold: float = 5e-2, tol: float = 1e-9) -> CountTimeline:
    """Bound-state count of ``H(t)`` at each sample, with resonance margins at changes.

    ``delta_gap="threshold"`` uses ``-torus_threshold_energy`` of the grid,
    so that a level is counted once its whole-space counterpart is bound.
    """
    times = np.asarray(times, float)
    if np.any(~np.isfinite(times)) or np.any(np.diff(times) < 0):
        raise ValueError("times must be finite and sorted")
    counts, prev = [], None
    changes = []
    green = None
    for t in times:
        V = Vt(t)
        gap = -torus_threshold_energy(V.grid) if delta_gap == "threshold" else float(delta_gap)
        spec = bound_states(V, k_max=k_max, delta_gap=gap, tol=tol,
                            x0=prev.eigenfields if prev is not None and prev.count else None)
        counts.append(spec.count)
        if prev is not None and spec.count != prev.count:
            green = green or FreeGreen(V.grid)
            rep = resonance_test(V, threshold=threshold, green=green)
            changes.append((float(t), prev.count, spec.count, rep.distance_to_resonance))
        prev = spec
    return CountTimeline(times, np.asarray(counts), changes)
