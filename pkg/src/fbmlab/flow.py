"""Pathwise integration of the flow and its variational processes.

Along a piecewise-linear driver the equation is an ordinary ODE on each
interval, so Euler and Heun steps on the driver slopes are used directly.
All five processes are integrated together:

    dX      = sum_l V_l(X) dB^l
    dJ      = sum_l dV_l(X) J dB^l
    dJinv   = -sum_l Jinv dV_l(X) dB^l
    dalpha  = -alpha Omega(dB)           Omega(dB)[j, k] = sum_l omega_{lj}^k dB^l
    dbeta   = Omega(dB) beta

with ``alpha[i, k] = alpha^i_k`` defined by ``J_t V_i(x) = sum_k alpha^i_k V_k(X_t)``
(in matrix form ``J_t V(x) = V(X_t) alpha_t^T``) and ``beta = alpha^{-1}``.
Every array carries a leading path axis so a whole ensemble moves at once.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .errors import DomainError
from .fbm import FbmPath, TimeGrid, holder_seminorm, require_regular
from .systems import COND_LIMIT, VectorFieldSystem, check_hypothesis_skew


@dataclass
class DriverPath:
    """Piecewise-linear interpolation of sampled fBm at dyadic level ``level``.

    ``values`` has shape ``(P, N + 1, n)`` with ``N = 2**level``; the driver
    coincides with the sampled path at the nodes ``i 2^-level T``.
    """

    times: np.ndarray
    values: np.ndarray
    H: float
    level: int

    @classmethod
    def from_samples(cls, grid: TimeGrid, values, H, level: int | None = None) -> "DriverPath":
        values = np.asarray(values, dtype=float)
        if values.ndim == 2:
            values = values[None]
        if level is None:
            level = grid.level
        if level > grid.level or level < 0:
            raise DomainError(f"interpolation level {level} exceeds sample level {grid.level}")
        stride = 2 ** (grid.level - level)
        return cls(grid.times[::stride].copy(), values[:, ::stride].copy(), float(H), level)

    @classmethod
    def from_fbm(cls, path: FbmPath, level: int | None = None) -> "DriverPath":
        return cls.from_samples(path.grid, path.values.T, path.H, level)

    @property
    def N(self) -> int:
        return len(self.times) - 1

    @property
    def paths(self) -> int:
        return self.values.shape[0]

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=1)

    @property
    def slopes(self) -> np.ndarray:
        return self.increments / np.diff(self.times)[None, :, None]

    def repeat(self, k: int) -> "DriverPath":
        """Same driver for ``k`` consecutive start points per path (path-major)."""
        return DriverPath(self.times, np.repeat(self.values, k, axis=0), self.H, self.level)


@dataclass
class FlowState:
    """Trajectories on the recorded nodes; arrays lead with the path axis."""

    times: np.ndarray
    x0: np.ndarray
    X: np.ndarray
    J: np.ndarray
    Jinv: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    ok: np.ndarray
    scheme: str
    substeps: int
    system_name: str = ""
    aborts: list = field(default_factory=list)
    B: np.ndarray | None = None
    H: float = 0.0

    @property
    def paths(self) -> int:
        return self.X.shape[0]

    def inverse_residual(self) -> np.ndarray:
        """max over nodes of ||J Jinv - I|| per path."""
        n = self.X.shape[-1]
        r = np.linalg.norm(self.J @ self.Jinv - np.eye(n), axis=(-2, -1))
        return r.max(axis=1)

    def duality_residual(self) -> np.ndarray:
        n = self.X.shape[-1]
        return np.linalg.norm(self.alpha @ self.beta - np.eye(n), axis=(-2, -1)).max(axis=1)

    def frame_residual(self, system: VectorFieldSystem) -> np.ndarray:
        """max over nodes of ||J_t V(x0) - V(X_t) alpha_t^T|| per path."""
        lhs = self.J @ system.V(self.x0)[:, None]
        rhs = system.V(self.X) @ np.swapaxes(self.alpha, -1, -2)
        return np.linalg.norm(lhs - rhs, axis=(-2, -1)).max(axis=1)

    def rel_beta_residual(self, system: VectorFieldSystem) -> np.ndarray:
        """max over nodes of |beta^i_j - sum_k W^j_k(x0) (Jinv V_i(X_t))^k|."""
        W0 = np.linalg.inv(system.V(self.x0))[:, None]
        pred = np.swapaxes(W0 @ self.Jinv @ system.V(self.X), -1, -2)
        return np.abs(pred - self.beta).max(axis=(1, 2, 3))

    def dump_csv(self, path, p: int = 0) -> Path:
        """Debug dump of one path: one block per process, matrices column-major."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            for label, arr in (("X", self.X), ("J", self.J), ("Jinv", self.Jinv),
                               ("alpha", self.alpha), ("beta", self.beta)):
                w.writerow([f"# {label}"])
                for k, t in enumerate(self.times):
                    entries = arr[p, k].reshape(-1, order="F") if arr.ndim == 4 else arr[p, k]
                    w.writerow([repr(float(t))] + [repr(float(v)) for v in entries])
        return path


def _rhs(system, X, J, Jinv, alpha, beta, e):
    """Increments of all processes for one step with driver increment ``e``."""
    V = system.V(X)
    dV = system.dV(X)
    om = system.omega(X)
    K = np.einsum("pl,plab->pab", e, dV)
    Om = np.einsum("pl,pljk->pjk", e, om)
    return (np.einsum("pai,pi->pa", V, e), K @ J, -Jinv @ K, -alpha @ Om, Om @ beta)


def integrate_flow(system: VectorFieldSystem, driver: DriverPath, x0, scheme: str = "heun",
                   substeps: int = 4, record: str = "nodes", check_frame: bool = True) -> FlowState:
    """Integrate X, J, Jinv, alpha, beta along ``driver`` from ``x0``.

    ``x0`` is one point (shared by every path) or an array ``(P, n)``.
    ``record="all"`` keeps every substep node instead of the driver nodes.
    Paths whose values turn non-finite, or whose frame degenerates, are marked
    in ``ok`` and left as NaN; the others are unaffected.
    """
    require_regular(driver.H)
    if scheme not in ("euler", "heun"):
        raise DomainError(f"unknown scheme {scheme!r}")
    if substeps < 1:
        raise DomainError("substeps must be positive")
    n = system.dim
    P = driver.paths
    if driver.values.shape[-1] != n:
        raise DomainError(f"driver has {driver.values.shape[-1]} components, system needs {n}")
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (P, n)).copy()
    eye = np.broadcast_to(np.eye(n), (P, n, n))
    state = [x0.copy(), eye.copy(), eye.copy(), eye.copy(), eye.copy()]
    inc = driver.increments / substeps
    N = driver.N
    every = 1 if record == "all" else substeps
    K = N * substeps // every + 1
    rec = [np.empty((P, K) + s.shape[1:]) for s in state]
    for buf, s in zip(rec, state):
        buf[:, 0] = s
    step_times = np.linspace(driver.times[0], driver.times[-1], N * substeps + 1)
    ok = np.ones(P, dtype=bool)
    col = 1
    with np.errstate(all="ignore"):
        for a in range(N):
            e = inc[:, a]
            for sub in range(substeps):
                k1 = _rhs(system, *state, e)
                if scheme == "euler":
                    state = [s + d for s, d in zip(state, k1)]
                else:
                    pred = [s + d for s, d in zip(state, k1)]
                    k2 = _rhs(system, *pred, e)
                    state = [s + 0.5 * (d1 + d2) for s, d1, d2 in zip(state, k1, k2)]
                if (a * substeps + sub + 1) % every == 0:
                    for buf, s in zip(rec, state):
                        buf[:, col] = s
                    col += 1
            bad = ~np.all(np.isfinite(state[0]), axis=-1)
            if bad.any():
                ok &= ~bad
                for s in state:
                    s[bad] = 0.0 if s.ndim == 2 else np.eye(n)
    aborts = []
    for p in np.flatnonzero(~ok):
        aborts.append((int(p), "non-finite values"))
    if check_frame and not system.synthetic:
        cond = np.linalg.cond(system.V(rec[0][ok]))
        worst = np.full(P, 0.0)
        worst[ok] = np.where(np.isfinite(cond), cond, np.inf).max(axis=1)
        degen = ok & (worst > COND_LIMIT)
        for p in np.flatnonzero(degen):
            aborts.append((int(p), f"frame degenerate along path (cond={worst[p]:.3g})"))
        ok &= ~degen
    for buf in rec:
        buf[~ok] = np.nan
    # driver at the recorded nodes (linear inside intervals)
    frac = np.arange(substeps + 1)[::every] / substeps if every < substeps else np.array([0.0])
    if every == 1 and substeps > 1:
        left = driver.values[:, :-1, None, :]
        Bfine = left + frac[None, None, :-1, None] * driver.increments[:, :, None, :]
        Brec = np.concatenate([Bfine.reshape(P, -1, n), driver.values[:, -1:]], axis=1)
    else:
        Brec = driver.values.copy()
    return FlowState(step_times[::every].copy(), x0, *rec, ok=ok, scheme=scheme,
                     substeps=substeps, system_name=system.name, aborts=aborts,
                     B=Brec, H=driver.H)


def exponential_alpha_update(omega_values, driver: DriverPath) -> np.ndarray:
    """alpha as an ordered product of matrix exponentials, one per interval.

    ``omega_values`` holds, per interval, the structure constants
    ``omega[l, j, k] = omega_{lj}^k`` averaged over the interval (midpoint
    rule), shaped ``(N, n, n, n)`` or ``(P, N, n, n, n)``. On interval ``a``
    ``alpha <- alpha @ expm(-sum_l dB^l_a omega_l)``; with skew-symmetric
    ``omega_l`` every factor is orthogonal.
    """
    om = np.asarray(omega_values, dtype=float)
    P, N = driver.paths, driver.N
    if om.ndim == 4:
        om = np.broadcast_to(om, (P,) + om.shape)
    if om.shape[:2] != (P, N):
        raise DomainError(f"expected omega values for {P} paths x {N} intervals, got {om.shape[:2]}")
    n = om.shape[-1]
    gen = -np.einsum("pal,paljk->pajk", driver.increments, om)
    factors = expm(gen.reshape(-1, n, n)).reshape(P, N, n, n)
    out = np.empty((P, N + 1, n, n))
    out[:, 0] = np.eye(n)
    for a in range(N):
        out[:, a + 1] = out[:, a] @ factors[:, a]
    return out


def midpoint_omega(system: VectorFieldSystem, flow: FlowState) -> np.ndarray:
    """Structure constants at the state midpoint of every recorded interval."""
    mid = 0.5 * (flow.X[:, 1:] + flow.X[:, :-1])
    return system.omega(mid)


def orthogonality_excess(alpha) -> float:
    """max over rows and columns of (squared norm - 1)."""
    alpha = np.asarray(alpha)
    rows = np.sum(alpha ** 2, axis=-1) - 1.0
    cols = np.sum(alpha ** 2, axis=-2) - 1.0
    return float(max(np.nanmax(rows), np.nanmax(cols)))


@dataclass
class RefinementReport:
    levels: list
    sup_distance: np.ndarray
    holder_distance: np.ndarray
    gamma: float
    node_sup_distance: np.ndarray | None = None

    def rows(self):
        for j, m in enumerate(self.levels):
            yield {"level": m, "sup": self.sup_distance[:, j], "holder": self.holder_distance[:, j]}


def refine_convergence(system: VectorFieldSystem, x0, base: FbmPath | tuple, levels, gamma: float,
                       scheme: str = "heun", substeps: int = 1) -> RefinementReport:
    """Distances between flows driven by consecutive dyadic interpolations.

    ``base`` is an :class:`FbmPath` or ``(grid, values (P, N+1, n), H)`` sampled
    at a level above every requested one. Level ``m`` is integrated with
    ``substeps * 2**(M - m)`` steps per interval so all flows land on the common
    fine grid, where ``||X^{m+1} - X^m||_inf`` and the gamma-Hoelder seminorm
    of the difference are measured per path. ``node_sup_distance`` restricts
    the sup to the level-m nodes, where both drivers coincide with the sampled
    path.
    """
    if isinstance(base, FbmPath):
        grid, values, H = base.grid, base.values.T[None], base.H
    else:
        grid, values, H = base
    h = require_regular(H)
    if not gamma < h:
        raise DomainError(f"gamma={gamma} must be below H={h}")
    levels = sorted(levels)
    M = levels[-1] + 1
    if M > grid.level:
        raise DomainError(f"need samples at level >= {M}, have {grid.level}")
    fine_steps = 2 ** M * substeps
    flows = {}
    for m in levels + [M]:
        drv = DriverPath.from_samples(grid, values, h, level=m)
        fl = integrate_flow(system, drv, x0, scheme=scheme, substeps=fine_steps // 2 ** m,
                            record="all", check_frame=False)
        flows[m] = fl
    P = values.shape[0]
    sup = np.empty((P, len(levels)))
    hol = np.empty((P, len(levels)))
    node = np.empty((P, len(levels)))
    for j, m in enumerate(levels):
        diff = flows[m + 1].X - flows[m].X
        times = flows[m].times
        sup[:, j] = np.abs(diff).max(axis=(1, 2))
        node[:, j] = np.abs(diff[:, :: fine_steps // 2 ** m]).max(axis=(1, 2))
        hol[:, j] = [holder_seminorm(diff[p], gamma, times=times) for p in range(P)]
    return RefinementReport(levels, sup, hol, gamma, node)


def skew_system_guard(system: VectorFieldSystem, points=None):
    from .systems import default_probe_points

    pts = default_probe_points(system.dim) if points is None else points
    return check_hypothesis_skew(system, pts)
