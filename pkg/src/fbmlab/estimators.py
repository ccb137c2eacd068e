"""Monte Carlo estimators of the semigroup, its gradient and the carre du champ.

All estimators run on one chunked path ensemble per (system, x, t, config).
Chunk ``c`` always holds the same path indices, each path draws from its own
counter-based substream, and chunk results are merged in chunk order with
the pairwise (count, mean, M2) update, so every estimate is bit-identical for
any number of worker threads.

Gradients ``V_i P_t f(x)`` come from three independent routes:

* ``fd``: central differences of ``P_t f`` along ``V_i(x)`` with common
  random numbers;
* ``commutation``: ``E[sum_k alpha^i_k (V_k f)(X_t)]``;
* ``ibp``: ``E[W_i f(X_t)]`` with the integration-by-parts weight
  ``W_i = sum_k T*_{V_k}(alpha^i_k)``, which needs no derivative of ``f``.

``ibp_frame`` is the plain weight ``E[T*_{V_i}1 f(X_t)] = E[(V_i f)(X_t)]``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DomainError
from .fbm import SeedSpec, TimeGrid, sample_fbm_batch
from .flow import DriverPath, integrate_flow
from .malliavin import HKernelGrid, malliavin_bundle
from .systems import VectorFieldSystem

ABORT_LIMIT = 1e-3
Z95 = 1.96


# ----------------------------------------------------------------------------
# test functions


@dataclass
class TestFunction:
    """Scalar function on R^n with optional analytic gradient."""

    __test__ = False  # not a pytest class

    name: str
    f: Callable
    grad: Callable | None = None
    bounded: bool = False
    sup_norm: float | None = None

    def __call__(self, y):
        return self.f(np.atleast_2d(np.asarray(y, dtype=float)))

    def gradient(self, y):
        if self.grad is None:
            raise DomainError(f"test function {self.name!r} has no analytic gradient")
        return self.grad(np.atleast_2d(np.asarray(y, dtype=float)))


def _unit(y, k, fn):
    g = np.zeros_like(y)
    g[:, k] = fn(y[:, k])
    return g


def sign_function(k: int = 0) -> TestFunction:
    return TestFunction("sign", lambda y: np.sign(y[:, k]), None, True, 1.0)


def cos_function(k: int = 0) -> TestFunction:
    return TestFunction("cos", lambda y: np.cos(y[:, k]), lambda y: _unit(y, k, lambda u: -np.sin(u)), True, 1.0)


def sin_function(k: int = 0) -> TestFunction:
    return TestFunction("sin", lambda y: np.sin(y[:, k]), lambda y: _unit(y, k, np.cos), True, 1.0)


def sin_cos_function() -> TestFunction:
    def f(y):
        return np.sin(y[:, 0]) * np.cos(y[:, 1])

    def g(y):
        return np.stack([np.cos(y[:, 0]) * np.cos(y[:, 1]), -np.sin(y[:, 0]) * np.sin(y[:, 1])], axis=-1)

    return TestFunction("sin_cos", f, g, True, 1.0)


def linear_function(c) -> TestFunction:
    c = np.asarray(c, dtype=float)
    return TestFunction("linear", lambda y: y @ c, lambda y: np.broadcast_to(c, y.shape).copy(), False, None)


def constant_function(value: float = 1.0) -> TestFunction:
    return TestFunction("constant", lambda y: np.full(len(y), float(value)), lambda y: np.zeros_like(y),
                        True, abs(float(value)))


def make_test_function(name: str, dim: int, **params) -> TestFunction:
    """Catalog lookup: sign, cos, sin, sin_cos, linear, constant."""
    if name == "sign":
        return sign_function(int(params.get("component", 0)))
    if name == "cos":
        return cos_function(int(params.get("component", 0)))
    if name == "sin":
        return sin_function(int(params.get("component", 0)))
    if name == "sin_cos":
        if dim < 2:
            raise ConfigError([f"test function sin_cos needs dimension >= 2, got {dim}"])
        return sin_cos_function()
    if name == "linear":
        c = params.get("coefficients", [1.0] * dim)
        if len(c) != dim:
            raise ConfigError([f"linear coefficients must have length {dim}"])
        return linear_function(c)
    if name == "constant":
        return constant_function(float(params.get("value", 1.0)))
    raise ConfigError([f"unknown test function {name!r}; known: sign, cos, sin, sin_cos, linear, constant"])


TEST_FUNCTIONS = ("sign", "cos", "sin", "sin_cos", "linear", "constant")


def carre_du_champ(system: VectorFieldSystem, f: TestFunction, x) -> np.ndarray:
    """Gamma(f)(x) = sum_i <grad f(x), V_i(x)>^2; one value per row of x."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    vf = np.einsum("pa,pai->pi", f.gradient(x), system.V(x))
    out = np.sum(vf ** 2, axis=-1)
    return out


# ----------------------------------------------------------------------------
# accumulation and results


@dataclass
class Accumulator:
    """Streaming (count, mean, M2) per component, merged in a fixed order."""

    count: int = 0
    mean: np.ndarray | float = 0.0
    m2: np.ndarray | float = 0.0

    @classmethod
    def from_samples(cls, samples) -> "Accumulator":
        a = np.asarray(samples, dtype=float)
        if len(a) == 0:
            return cls()
        mean = a.mean(axis=0)
        return cls(len(a), mean, ((a - mean) ** 2).sum(axis=0))

    def merge(self, other: "Accumulator") -> "Accumulator":
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta ** 2 * (self.count * other.count / n)
        return Accumulator(n, mean, m2)

    @property
    def variance(self):
        return self.m2 / (self.count - 1) if self.count > 1 else np.nan * np.asarray(self.mean)

    @property
    def stderr(self):
        return np.sqrt(self.variance / self.count) if self.count > 1 else np.nan * np.asarray(self.mean)


@dataclass
class EstimateWithCI:
    """Monte Carlo mean with standard error and 95% interval."""

    estimator: str
    mean: float
    stderr: float
    paths: int
    seed: int
    T: float
    N: int
    aborted: int = 0
    valid: bool = True
    variance: float = float("nan")

    @property
    def ci(self) -> tuple[float, float]:
        return (self.mean - Z95 * self.stderr, self.mean + Z95 * self.stderr)

    def overlaps(self, other: "EstimateWithCI") -> bool:
        a, b = self.ci, other.ci
        return a[0] <= b[1] and b[0] <= a[1]

    def contains(self, value: float, k: float = Z95) -> bool:
        return abs(self.mean - value) <= k * self.stderr

    def zscore(self, value: float) -> float:
        if self.stderr == 0:
            return 0.0 if self.mean == value else math.copysign(math.inf, self.mean - value)
        return (self.mean - value) / self.stderr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci_low"], d["ci_high"] = self.ci
        return d


def _estimates(name, acc: Accumulator, cfg, T, total, aborted):
    mean = np.atleast_1d(np.asarray(acc.mean, dtype=float))
    se = np.atleast_1d(np.asarray(acc.stderr, dtype=float))
    var = np.atleast_1d(np.asarray(acc.variance, dtype=float))
    valid = acc.count >= 2 and aborted <= ABORT_LIMIT * total
    return [EstimateWithCI(name, float(m), float(s), acc.count, cfg.seed, float(T), cfg.N, aborted, valid, float(v))
            for m, s, v in zip(mean, se, var)]


# ----------------------------------------------------------------------------
# ensemble


@dataclass
class MonteCarloConfig:
    """Ensemble settings; ``level`` is the dyadic interpolation level (default log2 N)."""

    paths: int = 10_000
    N: int = 128
    scheme: str = "heun"
    substeps: int = 4
    seed: int = 2024
    level: int | None = None
    antithetic: bool = False
    method: str = "cholesky"
    chunk: int = 32
    workers: int = 1
    cell_rule: str = "trapezoid"
    fd_step: float = 1e-3

    def __post_init__(self):
        problems = []
        if self.paths < 2:
            problems.append(f"paths must be at least 2, got {self.paths}")
        if self.N < 1 or self.N & (self.N - 1):
            problems.append(f"N must be a power of two, got {self.N}")
        if self.chunk < 1:
            problems.append("chunk must be positive")
        if self.workers < 1:
            problems.append("workers must be positive")
        if self.scheme not in ("euler", "heun"):
            problems.append(f"scheme must be euler or heun, got {self.scheme!r}")
        if self.method not in ("cholesky", "circulant"):
            problems.append(f"method must be cholesky or circulant, got {self.method!r}")
        if self.antithetic and self.paths % 2:
            problems.append("antithetic sampling needs an even path count")
        if self.antithetic and self.chunk % 2:
            problems.append("antithetic sampling needs an even chunk size")
        if problems:
            raise ConfigError(problems)


class ChunkContext:
    """Lazily computed objects of one ensemble chunk."""

    def __init__(self, system, x, t, H, cfg: MonteCarloConfig, B, kernel):
        self.system, self.x, self.t, self.H, self.cfg = system, x, t, H, cfg
        self.grid = TimeGrid(t, cfg.N)
        self.driver_values = B
        self.driver = DriverPath.from_samples(self.grid, B, H, cfg.level)
        self.kernel = kernel
        self.extra_ok = []
        self._flow = None
        self._bundle = None
        self._matrices = None
        self._shifted = {}

    @property
    def flow(self):
        if self._flow is None:
            self._flow = integrate_flow(self.system, self.driver, self.x, scheme=self.cfg.scheme,
                                        substeps=self.cfg.substeps)
        return self._flow

    @property
    def X_t(self):
        return self.flow.X[:, -1]

    @property
    def bundle(self):
        if self._bundle is None:
            self._bundle = malliavin_bundle(self.flow, self.system, self.kernel, cell_rule=self.cfg.cell_rule)
        return self._bundle

    @property
    def matrices(self):
        """Malliavin matrices without the weights (cheaper than ``bundle``)."""
        if self._bundle is not None:
            return self._bundle
        if self._matrices is None:
            self._matrices = malliavin_bundle(self.flow, self.system, self.kernel, cell_rule=self.cfg.cell_rule,
                                              with_weight=False)
        return self._matrices

    def shifted(self, step: float):
        """X_t from ``x +- step V_i(x)`` for every i; returns (plus, minus, ok), plus/minus (P, n, n)."""
        if step not in self._shifted:
            n = self.system.dim
            P = self.driver.paths
            Vx = self.system.V(self.x[None])[0]
            starts = np.concatenate([self.x + step * Vx.T, self.x - step * Vx.T])  # (2n, n)
            x0 = np.tile(starts, (P, 1))
            fl = integrate_flow(self.system, self.driver.repeat(2 * n), x0, scheme=self.cfg.scheme,
                                substeps=self.cfg.substeps)
            Xt = fl.X[:, -1].reshape(P, 2, n, n)
            ok = fl.ok.reshape(P, 2 * n).all(axis=1)
            self._shifted[step] = (Xt[:, 0], Xt[:, 1], ok)
        return self._shifted[step]

    @property
    def ok(self):
        ok = self.flow.ok.copy()
        for b in (self._bundle, self._matrices):
            if b is not None:
                ok &= b.ok
        for _, _, o in self._shifted.values():
            ok &= o
        for o in self.extra_ok:
            ok &= o
        return ok


def fd_step_for(x, cfg: MonteCarloConfig) -> float:
    return cfg.fd_step * max(1.0, float(np.linalg.norm(x)))


def run_ensemble(system: VectorFieldSystem, x, t: float, H: float, cfg: MonteCarloConfig,
                 observables: Callable[[ChunkContext], dict]) -> tuple[dict, int, int]:
    """Evaluate ``observables(ctx) -> {name: (P, ...) array}`` over the ensemble.

    The grid is ``TimeGrid(t, cfg.N)``. Returns ``({name: Accumulator},
    aborted, total)``; aborted paths are excluded from every accumulator.
    """
    x = np.asarray(x, dtype=float).reshape(system.dim)
    if not 0.0 < t <= 1.0:
        raise DomainError(f"t must lie in (0, 1], got {t}")
    grid = TimeGrid(t, cfg.N)
    level = grid.level if cfg.level is None else cfg.level
    if not 0 <= level <= grid.level:
        raise DomainError(f"interpolation level {level} outside [0, {grid.level}]")
    kernel = HKernelGrid(grid.times[:: 2 ** (grid.level - level)], H)
    seed = SeedSpec(cfg.seed)
    starts = list(range(0, cfg.paths, cfg.chunk))

    def work(start):
        idx = range(start, min(cfg.paths, start + cfg.chunk))
        B = sample_fbm_batch(grid, H, system.dim, seed, idx, method=cfg.method, antithetic=cfg.antithetic)
        ctx = ChunkContext(system, x, t, H, cfg, B, kernel)
        values = observables(ctx)
        ok = ctx.ok
        accs = {k: Accumulator.from_samples(np.asarray(v)[ok]) for k, v in values.items()}
        return accs, int((~ok).sum())

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(work, starts))
    else:
        results = [work(s) for s in starts]
    merged: dict = {}
    aborted = 0
    for accs, bad in results:
        aborted += bad
        for k, a in accs.items():
            merged[k] = merged[k].merge(a) if k in merged else a
    return merged, aborted, cfg.paths


# ----------------------------------------------------------------------------
# observables and estimators

ESTIMATORS = ("semigroup", "commutation", "ibp", "ibp_frame", "fd")


def gradient_observables(system: VectorFieldSystem, f: TestFunction, which, step: float | None = None):
    """Observable map for the requested estimators (see ``ESTIMATORS``)."""
    unknown = set(which) - set(ESTIMATORS)
    if unknown:
        raise DomainError(f"unknown estimators {sorted(unknown)}")
    if {"commutation"} & set(which) and f.grad is None:
        raise DomainError(f"commutation estimator needs an analytic gradient of {f.name!r}")

    def observe(ctx: ChunkContext):
        out = {}
        Xt = ctx.X_t
        safe = np.where(ctx.flow.ok[:, None], Xt, 0.0)
        fx = f(safe)
        if "semigroup" in which:
            out["semigroup"] = fx
        if "commutation" in which:
            vf = np.einsum("pa,pak->pk", f.gradient(safe), system.V(safe))
            alpha = np.where(ctx.flow.ok[:, None, None], ctx.flow.alpha[:, -1], 0.0)
            out["commutation"] = np.einsum("pik,pk->pi", alpha, vf)
        if "ibp" in which:
            out["ibp"] = ctx.bundle.gradient_weight * fx[:, None]
        if "ibp_frame" in which:
            out["ibp_frame"] = ctx.bundle.weight * fx[:, None]
        if "fd" in which:
            h = step if step is not None else fd_step_for(ctx.x, ctx.cfg)
            plus, minus, _ = ctx.shifted(h)
            P, n = plus.shape[:2]
            fp = f(np.nan_to_num(plus.reshape(-1, n))).reshape(P, n)
            fm = f(np.nan_to_num(minus.reshape(-1, n))).reshape(P, n)
            out["fd"] = (fp - fm) / (2.0 * h)
        return out

    return observe


def estimate_all(system: VectorFieldSystem, x, t: float, H: float, f: TestFunction, cfg: MonteCarloConfig,
                 which=("semigroup", "commutation", "ibp", "fd")) -> dict:
    """All requested estimators from one shared ensemble; ``{name: [EstimateWithCI]}``."""
    accs, aborted, total = run_ensemble(system, x, t, H, cfg, gradient_observables(system, f, which))
    return {k: _estimates(k, accs[k], cfg, t, total, aborted) for k in which}


def semigroup_estimate(system, x, t, H, f: TestFunction, cfg: MonteCarloConfig) -> EstimateWithCI:
    """P_t f(x) = E f(X_t^x)."""
    return estimate_all(system, x, t, H, f, cfg, ("semigroup",))["semigroup"][0]


def gradient_commutation(system, x, t, H, f: TestFunction, cfg: MonteCarloConfig) -> list:
    """V_i P_t f(x) = E[sum_k alpha^i_k (V_k f)(X_t)] per i."""
    return estimate_all(system, x, t, H, f, cfg, ("commutation",))["commutation"]


def gradient_ibp(system, x, t, H, f: TestFunction, cfg: MonteCarloConfig) -> list:
    """V_i P_t f(x) = E[W_i f(X_t)] per i; f only needs to be bounded and measurable."""
    return estimate_all(system, x, t, H, f, cfg, ("ibp",))["ibp"]


def gradient_fd(system, x, t, H, f: TestFunction, cfg: MonteCarloConfig, step: float | None = None) -> list:
    """Central differences of P_t f along V_i(x) with common random numbers."""
    accs, aborted, total = run_ensemble(system, x, t, H, cfg, gradient_observables(system, f, ("fd",), step))
    return _estimates("fd", accs["fd"], cfg, t, total, aborted)
