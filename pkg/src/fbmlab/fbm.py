"""Fractional Brownian motion: covariance, exact sampling, Volterra kernel.

Everything here works on a uniform grid over ``[0, T]`` with ``T <= 1``.
Samples are exact Gaussian vectors (Cholesky of the increment covariance by
default, circulant embedding as a fast path) and are a pure function of
``(grid, H, seed, path_index)``.
"""
from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import integrate, special

from . import kernels
from .errors import DomainError


@dataclass(frozen=True)
class HurstParam:
    """Hurst index of the driver.

    ``oracle=True`` admits ``H = 1/2`` (Brownian motion); this is reserved for
    oracle tests, the flow and Malliavin layers refuse it.
    """

    H: float
    oracle: bool = False

    def __post_init__(self):
        lo_ok = self.H >= 0.5 if self.oracle else self.H > 0.5
        if not (lo_ok and self.H < 1.0):
            bound = "[1/2, 1)" if self.oracle else "(1/2, 1)"
            raise DomainError(f"Hurst parameter must lie in {bound}, got {self.H}")

    @property
    def alpha_H(self) -> float:
        return self.H * (2.0 * self.H - 1.0)

    def __float__(self):
        return float(self.H)


def _hurst_value(H, oracle=True) -> float:
    if isinstance(H, HurstParam):
        return H.H
    return HurstParam(float(H), oracle=oracle).H


def require_regular(H) -> float:
    """Return H as a float, rejecting the oracle-only value 1/2."""
    h = _hurst_value(H)
    if not h > 0.5:
        raise DomainError(f"this operation requires H > 1/2, got {h}")
    return h


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k T / N`` with N a power of two."""

    T: float
    N: int

    def __post_init__(self):
        if not (0.0 < self.T <= 1.0):
            raise DomainError(f"horizon must lie in (0, 1], got {self.T}")
        if self.N < 1 or (self.N & (self.N - 1)):
            raise DomainError(f"number of steps must be a power of two, got {self.N}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * (self.T / self.N)

    @property
    def level(self) -> int:
        return self.N.bit_length() - 1

    def index_of(self, t: float) -> int:
        k = int(round(t / self.dt))
        if k < 0 or k > self.N or not math.isclose(k * self.dt, t, rel_tol=1e-12, abs_tol=1e-15):
            raise DomainError(f"t={t} is not a grid point of {self}")
        return k

    def coarsen(self, N: int) -> "TimeGrid":
        if N > self.N or self.N % N:
            raise DomainError(f"cannot coarsen N={self.N} to N={N}")
        return TimeGrid(self.T, N)


@dataclass(frozen=True)
class SeedSpec:
    """Master seed plus counter-based per-path substreams.

    Path ``p`` draws from a Philox generator keyed by ``SeedSequence(seed,
    spawn_key=(p,))``, so its output never depends on which other paths are
    generated, or in what order.
    """

    seed: int

    def generator(self, path_index: int) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1), spawn_key=(int(path_index),))
        return np.random.Generator(np.random.Philox(ss))


@dataclass
class FbmPath:
    """One n-dimensional fBm sample; ``values[i, k] = B^i(t_k)``."""

    grid: TimeGrid
    values: np.ndarray
    H: float = 0.0
    path_index: int = 0

    @property
    def components(self) -> int:
        return self.values.shape[0]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"comp_{i}" for i in range(self.components)])
            for k, t in enumerate(self.grid.times):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in self.values[:, k]])
        return path

    @classmethod
    def from_csv(cls, path, T=None) -> "FbmPath":
        with Path(path).open() as fh:
            rows = list(csv.reader(fh))
        data = np.array([[float(v) for v in r] for r in rows[1:]])
        times = data[:, 0]
        grid = TimeGrid(float(times[-1]) if T is None else T, len(times) - 1)
        return cls(grid, data[:, 1:].T.copy())


def fbm_covariance(s, t, H) -> float:
    """R(t, s) = (s^2H + t^2H - |t - s|^2H) / 2."""
    h = _hurst_value(H)
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(s < 0) or np.any(t < 0):
        raise DomainError("fbm_covariance requires non-negative times")
    out = 0.5 * (s ** (2 * h) + t ** (2 * h) - np.abs(t - s) ** (2 * h))
    return float(out) if out.ndim == 0 else out


def covariance_matrix(times, H) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    return fbm_covariance(times[:, None], times[None, :], H)


def increment_covariance(grid: TimeGrid, H) -> np.ndarray:
    """Covariance of the N increments on ``grid`` (fractional Gaussian noise)."""
    h = _hurst_value(H)
    k = np.arange(grid.N, dtype=float)
    lag = np.abs(k[:, None] - k[None, :])
    r = 0.5 * (np.abs(lag + 1) ** (2 * h) - 2 * lag ** (2 * h) + np.abs(lag - 1) ** (2 * h))
    return r * grid.dt ** (2 * h)


@functools.lru_cache(maxsize=64)
def _cholesky_factor(T: float, N: int, h: float) -> np.ndarray:
    cov = increment_covariance(TimeGrid(T, N), h)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"increment covariance not positive definite (T={T}, N={N}, H={h})"
        ) from exc
    L.setflags(write=False)
    return L


@functools.lru_cache(maxsize=64)
def _circulant_sqrt_eigs(N: int, h: float) -> np.ndarray:
    k = np.arange(N + 1, dtype=float)
    r = 0.5 * (np.abs(k + 1) ** (2 * h) - 2 * k ** (2 * h) + np.abs(k - 1) ** (2 * h))
    c = np.concatenate([r, r[-2:0:-1]])
    lam = np.fft.fft(c).real
    if lam.min() < -1e-10 * lam.max():
        raise np.linalg.LinAlgError("circulant embedding is not positive semidefinite")
    out = np.sqrt(np.clip(lam, 0.0, None) / (2 * N))
    out.setflags(write=False)
    return out


def _increments_from_normals(grid: TimeGrid, h: float, z: np.ndarray, method: str) -> np.ndarray:
    """Map i.i.d. normals (..., N) or (..., 4N) to fGn increments (..., N)."""
    if method == "cholesky":
        return z @ _cholesky_factor(grid.T, grid.N, h).T
    if method == "circulant":
        N = grid.N
        s = _circulant_sqrt_eigs(N, h)
        w = np.fft.fft(s * (z[..., : 2 * N] + 1j * z[..., 2 * N :]), axis=-1)
        return w.real[..., :N] * grid.dt ** h
    raise DomainError(f"unknown sampler method {method!r}")


def _normals_per_component(grid: TimeGrid, method: str) -> int:
    return grid.N if method == "cholesky" else 4 * grid.N


def sample_fbm_batch(grid: TimeGrid, H, n: int, seed: SeedSpec, path_indices: Sequence[int],
                     method: str = "cholesky", antithetic: bool = False) -> np.ndarray:
    """Sample paths for the given indices; returns shape ``(P, N + 1, n)``.

    With ``antithetic=True`` path ``2j + 1`` is the negation of path ``2j``.
    """
    h = _hurst_value(H)
    if n < 1:
        raise DomainError("need at least one component")
    idx = np.asarray(path_indices, dtype=np.int64)
    width = _normals_per_component(grid, method)
    z = np.empty((len(idx), n, width))
    for row, p in enumerate(idx):
        base, sign = (p // 2, -1.0 if p % 2 else 1.0) if antithetic else (p, 1.0)
        z[row] = sign * seed.generator(base).standard_normal((n, width))
    inc = _increments_from_normals(grid, h, z, method)
    out = np.zeros((len(idx), grid.N + 1, n))
    out[:, 1:, :] = np.cumsum(inc, axis=-1).transpose(0, 2, 1)
    return out


def sample_fbm(grid: TimeGrid, H, n: int, seed: SeedSpec, path_index: int,
               method: str = "cholesky") -> FbmPath:
    """Exact sample of one n-dimensional fBm path on ``grid``."""
    values = sample_fbm_batch(grid, H, n, seed, [path_index], method=method)[0]
    return FbmPath(grid, values.T.copy(), H=_hurst_value(H), path_index=path_index)


# ----------------------------------------------------------------------------
# Volterra kernel K_H(t, s) = c_H s^(1/2-H) int_s^t (u-s)^(H-3/2) u^(H-1/2) du


def _kernel_shape(t, s, h, nodes):
    """Kernel without the constant c_H, vectorised over broadcastable t, s.

    The substitution ``u = s + w**p`` with ``p = 1/(H - 1/2)`` turns the
    endpoint singularity ``(u - s)^(H - 3/2) du`` into ``p dw``, leaving the
    smooth integrand ``p u^(H - 1/2)`` for Gauss-Legendre.
    """
    t, s = np.broadcast_arrays(np.asarray(t, float), np.asarray(s, float))
    p = 1.0 / (h - 0.5)
    x, wts = np.polynomial.legendre.leggauss(nodes)
    wmax = (t - s) ** (h - 0.5)
    w = 0.5 * (x + 1.0) * wmax[..., None]
    u = s[..., None] + w ** p
    integral = 0.5 * wmax * np.sum(wts * p * u ** (h - 0.5), axis=-1)
    return s ** (0.5 - h) * integral


@functools.lru_cache(maxsize=32)
def volterra_constant(H, quadrature_nodes: int = 64) -> float:
    """c_H fixed by requiring ``int_0^1 K_H(1, u)^2 du = R(1, 1) = 1``."""
    h = require_regular(H)
    q = 1.0 / (2.0 - 2.0 * h)  # u = z**q removes the u^(1-2H) singularity at 0

    def integrand(z):
        u = z ** q
        return _kernel_shape(1.0, u, h, quadrature_nodes) ** 2 * q * z ** (q - 1.0)

    val, _ = integrate.quad(integrand, 0.0, 1.0, limit=200, epsabs=1e-13, epsrel=1e-12)
    return 1.0 / math.sqrt(val)


def volterra_constant_gamma(H) -> float:
    """Closed-form c_H = sqrt(H(2H-1) / B(2-2H, H-1/2)) used as a cross-check."""
    h = require_regular(H)
    return math.sqrt(h * (2 * h - 1) / special.beta(2 - 2 * h, h - 0.5))


def volterra_kernel(t, s, H, quadrature_nodes: int = 64):
    """K_H(t, s) for ``0 < s < t``; vectorised over array arguments."""
    h = require_regular(H)
    ta, sa = np.asarray(t, float), np.asarray(s, float)
    if np.any(sa <= 0):
        raise DomainError("volterra_kernel requires s > 0 (singular prefactor at s = 0)")
    if np.any(sa >= ta):
        raise DomainError("volterra_kernel requires s < t")
    out = volterra_constant(h, quadrature_nodes) * _kernel_shape(ta, sa, h, quadrature_nodes)
    return float(out) if out.ndim == 0 else out


def _kernel_or_zero(t, s, h, nodes):
    t, s = np.broadcast_arrays(np.asarray(t, float), np.asarray(s, float))
    out = np.zeros(t.shape)
    live = t > s
    if np.any(live):
        out[live] = volterra_kernel(t[live], s[live], h, nodes)
    return out


def volterra_isometry(t: float, s: float, H, quadrature_nodes: int = 64) -> float:
    """Quadrature value of ``int_0^min(s,t) K_H(t,u) K_H(s,u) du``."""
    h = require_regular(H)
    lo = min(s, t)
    q = 1.0 / (2.0 - 2.0 * h)

    def integrand(z):
        u = lo * z ** q
        return (_kernel_or_zero(t, u, h, quadrature_nodes) * _kernel_or_zero(s, u, h, quadrature_nodes)
                * lo * q * z ** (q - 1.0))

    val, _ = integrate.quad(integrand, 0.0, 1.0, limit=200, epsabs=1e-13, epsrel=1e-11)
    return val


def kstar_transform(phi, grid: TimeGrid, H, points=None, quadrature_nodes: int = 64) -> np.ndarray:
    """(K* phi)(s) = int_s^1 phi(t) dK_H/dt(t, s) dt for a step function phi.

    ``phi[j]`` is the value on grid cell ``[t_j, t_{j+1})``; phi vanishes past
    the horizon. Each cell contributes a kernel difference (the kernel vanishes
    on the diagonal), evaluated at ``points`` (grid midpoints by default).
    """
    h = require_regular(H)
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (grid.N,):
        raise DomainError(f"phi must have one value per cell ({grid.N}), got {phi.shape}")
    times = grid.times
    s = (times[:-1] + times[1:]) / 2 if points is None else np.asarray(points, dtype=float)
    lo = np.maximum(times[None, :-1], s[:, None])
    hi = np.broadcast_to(times[None, 1:], lo.shape)
    contrib = _kernel_or_zero(hi, s[:, None], h, quadrature_nodes) - _kernel_or_zero(lo, s[:, None], h, quadrature_nodes)
    return contrib @ phi


def holder_seminorm(f, gamma: float, t: float | None = None, times=None) -> float:
    """max over grid pairs v < u <= t of |f(u) - f(v)| / (u - v)^gamma.

    ``f`` may be 1-D (one component) or 2-D with time on axis 0, in which case
    the Euclidean norm of the increment is used. Returns 0 when no pair exists.
    """
    f = np.asarray(f, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    if times is None:
        times = np.linspace(0.0, 1.0, f.shape[0])
    times = np.asarray(times, dtype=float)
    if t is not None:
        keep = times <= t + 1e-12
        times, f = times[keep], f[keep]
    if len(times) < 2:
        return 0.0
    return kernels.holder_seminorm(np.ascontiguousarray(times), np.ascontiguousarray(f), float(gamma))
