"""Vector-field frames V_1..V_n, their brackets and structure constants.

Array conventions (batched over any leading axes ``...``):

* ``V(x)[..., a, i] = V_i^a(x)``: column ``i`` is the field V_i.
* ``dV(x)[..., i, a, b] = d_b V_i^a(x)``.
* ``omega(x)[..., i, j, k] = omega_{ij}^k(x)`` with
  ``[V_i, V_j] = sum_k omega_{ij}^k V_k`` and the bracket
  ``[V_i, V_j]^b = sum_a V_i^a d_a V_j^b - V_j^a d_a V_i^b``.
* ``domega(x)[..., i, j, k, b] = d_b omega_{ij}^k(x)``.
"""
from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DomainError, FrameDegenerateError

COND_LIMIT = 1e8
SKEW_TOL = 1e-8


def _fd_step(x):
    return 1e-5 * np.maximum(1.0, np.linalg.norm(x, axis=-1))


def _central_difference(fn, x):
    """Stack d_b fn(x) along a new trailing axis (central differences)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    h = _fd_step(x)
    cols = []
    for b in range(n):
        e = np.zeros(n)
        e[b] = 1.0
        step = h[..., None] * e
        diff = (fn(x + step) - fn(x - step))
        cols.append(diff / (2.0 * h.reshape(h.shape + (1,) * (diff.ndim - h.ndim))))
    return np.stack(cols, axis=-1)


@dataclass
class VectorFieldSystem:
    """A frame of n smooth vector fields on R^n.

    ``fields`` is required; ``jacobians``, ``omega_fn`` and ``domega_fn`` are
    optional analytic derivatives. Missing Jacobians are replaced by central
    differences and ``fd_jacobians`` is set so reports can say so.
    """

    name: str
    dim: int
    fields: Callable[[np.ndarray], np.ndarray]
    jacobians: Callable[[np.ndarray], np.ndarray] | None = None
    omega_fn: Callable[[np.ndarray], np.ndarray] | None = None
    domega_fn: Callable[[np.ndarray], np.ndarray] | None = None
    params: dict = field(default_factory=dict)
    claims_hypothesis1: bool = True
    claims_hypothesis2: bool = False
    synthetic: bool = False

    @property
    def fd_jacobians(self) -> bool:
        return self.jacobians is None

    def V(self, x) -> np.ndarray:
        return np.asarray(self.fields(np.asarray(x, dtype=float)), dtype=float)

    def dV(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.jacobians is not None:
            return np.asarray(self.jacobians(x), dtype=float)
        # d_b V[..., a, i] -> [..., i, a, b]
        return np.moveaxis(_central_difference(self.V, x), -2, -3)

    def omega(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.omega_fn is not None:
            return np.asarray(self.omega_fn(x), dtype=float)
        return omega_from_frame(self.V(x), self.dV(x))

    def domega(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.domega_fn is not None:
            return np.asarray(self.domega_fn(x), dtype=float)
        return _central_difference(self.omega, x)

    def describe(self) -> dict:
        return {"name": self.name, "dimension": self.dim, "params": dict(self.params),
                "analytic": not self.fd_jacobians}


def brackets_from_frame(V, dV) -> np.ndarray:
    """All brackets at once: ``out[..., i, j, b] = [V_i, V_j]^b``."""
    T = np.einsum("...jba,...ai->...ijb", dV, V)
    return T - np.swapaxes(T, -2, -3)


def omega_from_frame(V, dV) -> np.ndarray:
    n = V.shape[-1]
    br = brackets_from_frame(V, dV)
    out = np.zeros(br.shape)
    for i in range(n):
        for j in range(i + 1, n):
            coords = np.linalg.solve(V, br[..., i, j, :, None])[..., 0]
            out[..., i, j, :] = coords
            out[..., j, i, :] = -coords
    return out


@dataclass
class FrameMatrix:
    V: np.ndarray
    W: np.ndarray
    cond: float


def frame_matrix(system: VectorFieldSystem, x) -> FrameMatrix:
    """Frame matrix at x and its inverse; raises if the frame degenerates."""
    x = np.asarray(x, dtype=float)
    V = system.V(x)
    cond = float(np.linalg.cond(V))
    if not math.isfinite(cond) or cond > COND_LIMIT:
        raise FrameDegenerateError(x, cond)
    return FrameMatrix(V, np.linalg.inv(V), cond)


def lie_bracket(system: VectorFieldSystem, i: int, j: int, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = system.dim
    if not (0 <= i < n and 0 <= j < n):
        raise DomainError(f"bracket indices must lie in [0, {n}), got ({i}, {j})")
    V, dV = system.V(x), system.dV(x)
    return dV[j] @ V[:, i] - dV[i] @ V[:, j]


def structure_constants(system: VectorFieldSystem, x) -> np.ndarray:
    """omega(x) with entry ``[i, j, k] = omega_{ij}^k(x)``."""
    frame_matrix(system, x)
    return system.omega(x)


@dataclass
class SkewReport:
    points: np.ndarray
    violations: np.ndarray
    tol: float

    @property
    def max_violation(self) -> float:
        return float(self.violations.max()) if self.violations.size else 0.0

    @property
    def holds(self) -> bool:
        return self.max_violation <= self.tol


def check_hypothesis_skew(system: VectorFieldSystem, sample_points, tol: float = SKEW_TOL) -> SkewReport:
    """Per-point max of |omega_{ij}^k + omega_{ik}^j| over all index triples."""
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    om = system.omega(pts)
    viol = np.abs(om + np.swapaxes(om, -1, -2)).reshape(len(pts), -1).max(axis=1)
    return SkewReport(pts, viol, tol)


def default_probe_points(n: int, count: int = 25, box: float = 2.0, seed: int = 7) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-box, box, size=(count, n))


# ----------------------------------------------------------------------------
# catalog


def _batch_eye(x, n):
    return np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n)).copy()


def identity_frame(n: int = 2) -> VectorFieldSystem:
    zeros = lambda x, k: np.zeros(x.shape[:-1] + (n,) * k)
    return VectorFieldSystem(
        "identity", n, lambda x: _batch_eye(x, n), lambda x: zeros(x, 3),
        lambda x: zeros(x, 3), lambda x: zeros(x, 4), params={"n": n},
        claims_hypothesis2=True)


def constant_frame(matrix=None, name="constant") -> VectorFieldSystem:
    A = np.array([[2.0, 1.0], [0.5, 1.0]] if matrix is None else matrix, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DomainError("constant frame needs a square matrix")
    n = A.shape[0]
    zeros = lambda x, k: np.zeros(x.shape[:-1] + (n,) * k)
    return VectorFieldSystem(
        name, n, lambda x: np.broadcast_to(A, x.shape[:-1] + (n, n)).copy(),
        lambda x: zeros(x, 3), lambda x: zeros(x, 3), lambda x: zeros(x, 4),
        params={"matrix": A.ravel().tolist()}, claims_hypothesis2=True)


def rotated_frame(angle: float = 0.5) -> VectorFieldSystem:
    """Constant orthonormal frame: e_1, e_2 rotated by ``angle``."""
    c, s = math.cos(angle), math.sin(angle)
    system = constant_frame([[c, -s], [s, c]], name="rotated")
    system.params = {"angle": angle}
    return system


def shear_frame() -> VectorFieldSystem:
    """V_1 = (1, 0), V_2 = (sin x_1, 1); [V_1, V_2] = cos(x_1) V_1."""

    def fields(x):
        out = _batch_eye(x, 2)
        out[..., 0, 1] = np.sin(x[..., 0])
        return out

    def jac(x):
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        out[..., 1, 0, 0] = np.cos(x[..., 0])
        return out

    def omega(x):
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        out[..., 0, 1, 0] = np.cos(x[..., 0])
        out[..., 1, 0, 0] = -np.cos(x[..., 0])
        return out

    def domega(x):
        out = np.zeros(x.shape[:-1] + (2, 2, 2, 2))
        out[..., 0, 1, 0, 0] = -np.sin(x[..., 0])
        out[..., 1, 0, 0, 0] = np.sin(x[..., 0])
        return out

    return VectorFieldSystem("shear", 2, fields, jac, omega, domega)


def rotation_frame() -> VectorFieldSystem:
    """Orthonormal frame rotated by theta(x) = tanh(x_1)."""

    def fields(x):
        th = np.tanh(x[..., 0])
        c, s = np.cos(th), np.sin(th)
        out = np.empty(x.shape[:-1] + (2, 2))
        out[..., 0, 0], out[..., 1, 0] = c, s
        out[..., 0, 1], out[..., 1, 1] = -s, c
        return out

    def jac(x):
        th = np.tanh(x[..., 0])
        d = 1.0 - th ** 2
        c, s = np.cos(th), np.sin(th)
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        out[..., 0, 0, 0], out[..., 0, 1, 0] = -s * d, c * d
        out[..., 1, 0, 0], out[..., 1, 1, 0] = -c * d, -s * d
        return out

    def omega(x):
        th = np.tanh(x[..., 0])
        d = 1.0 - th ** 2
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        out[..., 0, 1, 0] = -d * np.cos(th)
        out[..., 0, 1, 1] = d * np.sin(th)
        out[..., 1, 0, :] = -out[..., 0, 1, :]
        return out

    def domega(x):
        th = np.tanh(x[..., 0])
        d = 1.0 - th ** 2
        c, s = np.cos(th), np.sin(th)
        out = np.zeros(x.shape[:-1] + (2, 2, 2, 2))
        out[..., 0, 1, 0, 0] = 2 * th * d * c + d * d * s
        out[..., 0, 1, 1, 0] = -2 * th * d * s + d * d * c
        out[..., 1, 0, :, :] = -out[..., 0, 1, :, :]
        return out

    return VectorFieldSystem("rotation", 2, fields, jac, omega, domega)


def linear_field_1d(a: float = 0.7) -> VectorFieldSystem:
    """V(x) = a x on R; unbounded, so it serves only as an integrator test."""
    zeros = lambda x, k: np.zeros(x.shape[:-1] + (1,) * k)
    return VectorFieldSystem(
        "linear1d", 1, lambda x: a * x[..., None], lambda x: np.full(x.shape[:-1] + (1, 1, 1), a),
        lambda x: zeros(x, 3), lambda x: zeros(x, 4), params={"a": a},
        claims_hypothesis1=False)


def levi_civita_generators() -> np.ndarray:
    """``omega[k, i, j] = eps_{ikj}`` for n = 3, each slice skew-symmetric."""
    eps = np.zeros((3, 3, 3))
    for i, j, k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        eps[i, j, k], eps[i, k, j] = 1.0, -1.0
    return np.transpose(eps, (1, 0, 2)).copy()


def synthetic_omega_system(omega_const) -> VectorFieldSystem:
    """Identity frame carrying externally supplied constant structure constants.

    The structure constants are deliberately inconsistent with the frame; this
    exercises the alpha equation alone, decoupled from any geometry.
    """
    om = np.asarray(omega_const, dtype=float)
    n = om.shape[0]
    base = identity_frame(n)
    return VectorFieldSystem(
        "synthetic", n, base.fields, base.jacobians,
        lambda x: np.broadcast_to(om, x.shape[:-1] + om.shape).copy(),
        lambda x: np.zeros(x.shape[:-1] + om.shape + (n,)),
        params={"omega": om.ravel().tolist()}, claims_hypothesis1=False,
        claims_hypothesis2=bool(np.allclose(om, -np.swapaxes(om, 1, 2))), synthetic=True)


# ----------------------------------------------------------------------------
# expression grammar for user fields

_FUNCS = {"sin": np.sin, "cos": np.cos, "tanh": np.tanh, "exp": np.exp}
_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply, ast.Div: np.divide}


def _compile_expr(src: str, n: int):
    try:
        tree = ast.parse(src.strip(), mode="eval").body
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse field expression {src!r}: {exc.msg}") from None

    def check(node):
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            check(node.left), check(node.right)
        elif isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            check(node.operand)
        elif isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS:
            if len(node.args) != 1 or node.keywords:
                raise ConfigError(f"{node.func.id} takes exactly one argument in {src!r}")
            check(node.args[0])
        elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            pass
        elif isinstance(node, ast.Name) and node.id.startswith("x") and node.id[1:].isdigit() \
                and 1 <= int(node.id[1:]) <= n:
            pass
        else:
            raise ConfigError(f"unsupported token {ast.dump(node)[:40]!r} in field expression {src!r}")

    check(tree)

    def ev(node, x):
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](ev(node.left, x), ev(node.right, x))
        if isinstance(node, ast.UnaryOp):
            v = ev(node.operand, x)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.Call):
            return _FUNCS[node.func.id](ev(node.args[0], x))
        if isinstance(node, ast.Constant):
            return np.full(x.shape[:-1], float(node.value))
        return x[..., int(node.id[1:]) - 1]

    return lambda x: ev(tree, x)


def expression_frame(spec: str, dimension: int) -> VectorFieldSystem:
    """Fields from text: fields separated by ``;``, components by ``,``.

    Example for the shear frame: ``"1, 0; sin(x1), 1"``. Derivatives come from
    central differences.
    """
    rows = [r for r in spec.split(";") if r.strip()]
    if len(rows) != dimension:
        raise ConfigError(f"expected {dimension} fields in expression, got {len(rows)}")
    comps = []
    for r in rows:
        parts = r.split(",")
        if len(parts) != dimension:
            raise ConfigError(f"field {r.strip()!r} must have {dimension} components")
        comps.append([_compile_expr(p, dimension) for p in parts])

    def fields(x):
        out = np.empty(x.shape[:-1] + (dimension, dimension))
        for i, row in enumerate(comps):
            for a, fn in enumerate(row):
                out[..., a, i] = fn(x)
        return out

    return VectorFieldSystem("expression", dimension, fields, params={"fields": spec})


CATALOG = {
    "identity": lambda dimension=2, **kw: identity_frame(int(dimension)),
    "constant": lambda matrix=None, dimension=None, **kw: constant_frame(
        None if matrix is None else np.reshape(np.asarray(matrix, float), (int(dimension or round(math.sqrt(len(matrix)))),) * 2)),
    "rotated": lambda angle=0.5, **kw: rotated_frame(float(angle)),
    "shear": lambda **kw: shear_frame(),
    "rotation": lambda **kw: rotation_frame(),
    "linear1d": lambda a=0.7, **kw: linear_field_1d(float(a)),
    "expression": lambda fields="", dimension=2, **kw: expression_frame(fields, int(dimension)),
}


def make_system(name: str, **params) -> VectorFieldSystem:
    try:
        builder = CATALOG[name]
    except KeyError:
        raise ConfigError(f"unknown system {name!r}; choose from {sorted(CATALOG)}") from None
    system = builder(**params)
    analytic = params.get("analytic")
    if analytic is not None and not analytic and system.jacobians is not None:
        # forced finite-difference mode: discard analytic derivatives
        system.jacobians = system.omega_fn = system.domega_fn = None
    return system
