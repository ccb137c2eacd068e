"""Malliavin calculus on the sampled grid.

Elements of the Cameron-Martin space are step functions on the grid cells.
Their inner product uses the exact increment covariance

    w(a, b) = E[(B_{s_{a+1}} - B_{s_a}) (B_{s_{b+1}} - B_{s_b})]
            = H(2H-1) int_a int_b |u - v|^(2H-2) du dv,

so indicators reproduce R(t, s) exactly and the diagonal singularity never
needs quadrature.

The derivative of a node value F(v) in the direction of cell ``b`` is
assembled from the pointwise derivatives D_s F(v) at the two cell ends
(``cell_rule="trapezoid"``, the default) or at the left end only
(``cell_rule="left"``); it vanishes for ``v <= s_b``. Step-function values of
h_l and of ``J^-1 V(X)`` follow the same rule, and the Young integral of beta
is formed with the matching Riemann sum, which keeps the discrete divergence
consistent with its own derivative.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DegenerateMalliavinError, DomainError
from .flow import FlowState
from .systems import VectorFieldSystem

CELL_RULES = ("trapezoid", "left")
M_COND_LIMIT = 1e12


class HKernelGrid:
    """Pairwise cell weights of the Cameron-Martin inner product on a grid."""

    def __init__(self, times, H):
        self.times = np.asarray(times, dtype=float)
        self.H = float(H)
        if not 0.0 < self.H < 1.0:
            raise DomainError(f"H must lie in (0, 1), got {H}")
        s = self.times
        p = 2.0 * self.H
        a, b = s[:-1, None], s[1:, None]
        c, d = s[None, :-1], s[None, 1:]
        self.weights = 0.5 * (np.abs(d - a) ** p + np.abs(c - b) ** p
                              - np.abs(c - a) ** p - np.abs(d - b) ** p)

    @property
    def cells(self) -> int:
        return len(self.times) - 1

    def restrict(self, K: int) -> np.ndarray:
        """Weights of the first K cells, i.e. of ``[0, t_K]``."""
        return self.weights[:K, :K]


def h_inner_product(f, g, kernel: HKernelGrid) -> float:
    """<f, g> for step functions given as per-cell values ``(N,)`` or ``(N, n)``."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    if g.ndim == 1:
        g = g[:, None]
    if f.shape != g.shape or f.shape[0] != kernel.cells:
        raise DomainError(f"step functions must both have {kernel.cells} cells, got {f.shape} and {g.shape}")
    return float(np.einsum("aq,ab,bq->", f, kernel.weights, g))


def indicator(t, kernel: HKernelGrid) -> np.ndarray:
    """Cell values of 1_[0, t] for a grid point t."""
    return (kernel.times[1:] <= t + 1e-12).astype(float)


def _node_index(times, t) -> int:
    k = int(np.argmin(np.abs(times - t)))
    if not np.isclose(times[k], t, rtol=1e-12, atol=1e-14):
        raise DomainError(f"t={t} is not a recorded node")
    return k


def malliavin_derivative_X(flow: FlowState, system: VectorFieldSystem, u: float, t: float, k: int) -> np.ndarray:
    """D^k_u X_t = J_t J_u^-1 V_k(X_u) for u <= t, zero otherwise; shape (P, n)."""
    iu, it = _node_index(flow.times, u), _node_index(flow.times, t)
    if iu > it:
        return np.zeros_like(flow.X[:, 0])
    Vk = system.V(flow.X[:, iu])[..., k]
    return np.einsum("pab,pbc,pc->pa", flow.J[:, it], flow.Jinv[:, iu], Vk)


def _require_nodes(flow: FlowState):
    if flow.B is None:
        raise DomainError("flow does not carry its driver samples")
    if flow.B.shape[1] != len(flow.times):
        raise DomainError("driver samples do not match the recorded nodes")


def dbeta_all(flow: FlowState, system: VectorFieldSystem, K: int | None = None) -> np.ndarray:
    """D^m_s beta(v) for all nodes s, v <= t_K; shape (P, K+1, n, K+1, n, n).

    Starting from the jump ``D^m_s beta(s) = Omega_m(X_s) beta(s)`` (entry
    ``sum_k omega_{mi}^k beta^k_j``), the linearised beta equation

        d(D beta) = sum_l [(grad Omega_l . D X) beta + Omega_l (D beta)] dB^l,
        D^m_s X_v = J_v J_s^-1 V_m(X_s),

    is stepped node to node with the flow's scheme by the compiled kernel.
    """
    _require_nodes(flow)
    K = len(flow.times) - 1 if K is None else K
    X = flow.X[:, : K + 1]
    beta = flow.beta[:, : K + 1]
    J = flow.J[:, : K + 1]
    dB = np.diff(flow.B[:, : K + 1], axis=1)
    om = system.omega(X)
    dom = system.domega(X)
    c = flow.Jinv[:, : K + 1] @ system.V(X)
    A = np.einsum("pvl,pvlik->pvik", dB, om[:, :-1])
    A2 = np.einsum("pvl,pvlik->pvik", dB, om[:, 1:])
    R = np.einsum("pvl,pvlikb->pvikb", dB, dom[:, :-1])
    R2 = np.einsum("pvl,pvlikb->pvikb", dB, dom[:, 1:])
    Q = np.einsum("pvikb,pvbc,pvkj->pvcij", R, J[:, :-1], beta[:, :-1], optimize=True)
    Q2 = np.einsum("pvikb,pvbc,pvkj->pvcij", R2, J[:, 1:], beta[:, 1:], optimize=True)
    jump = np.einsum("psmik,pskj->psmij", om, beta)
    return kernels.propagate_dbeta(A, A2, Q, Q2, jump, c, heun=(flow.scheme == "heun"))


def propagate_dbeta(flow: FlowState, system: VectorFieldSystem, u: float, m: int) -> np.ndarray:
    """D^m_u beta(v) on every node v (zero for v < u); shape (P, nodes, n, n)."""
    iu = _node_index(flow.times, u)
    Y = dbeta_all(flow, system)
    return Y[:, iu, m]


def _cells(node_values, rule):
    if rule == "trapezoid":
        return 0.5 * (node_values[:, :-1] + node_values[:, 1:])
    return node_values[:, :-1]


@dataclass
class MalliavinBundle:
    """Malliavin objects of one ensemble chunk at time ``t = times[K]``.

    Per-path arrays (leading axis P): ``h`` cell values ``[a, q, l]`` of h_l
    (component q), ``DX`` ``[b, m, :] = D^m_b X_t``, ``Gamma``, ``gamma``,
    ``M``, ``Minv``, ``young`` (int h_l dB), ``delta_h``, and ``weight``
    ``[i] = T*_{V_i} 1``. ``gradient_weight`` ``[i] = sum_k T*_{V_k}(alpha^i_k)``
    turns ``E[gradient_weight_i f(X_t)]`` into ``V_i P_t f(x)``. ``G`` is
    ``W @ h``, reused by the contractions.
    """

    t: float
    K: int
    H: float
    rule: str
    W: np.ndarray
    beta_t: np.ndarray
    J_t: np.ndarray
    X_t: np.ndarray
    h: np.ndarray
    G: np.ndarray
    DX: np.ndarray
    Gamma: np.ndarray
    gamma: np.ndarray
    M: np.ndarray
    Minv: np.ndarray
    ok: np.ndarray
    young: np.ndarray | None = None
    delta_h: np.ndarray | None = None
    weight: np.ndarray | None = None
    gradient_weight: np.ndarray | None = None
    DB: np.ndarray | None = None

    @property
    def scale(self) -> float:
        return self.t ** (2.0 * self.H)

    def h_pairing(self, G_cells) -> np.ndarray:
        """<g, h_l> for a step function ``g`` per path, cells ``[b, m]`` -> (P, n)."""
        return np.einsum("pbm,pbml->pl", G_cells, self.G)


def covariance_matrices(flow: FlowState, system: VectorFieldSystem, kernel: HKernelGrid,
                        t: float | None = None, cell_rule: str = "trapezoid"):
    """(Gamma, gamma, M, Minv) per path at grid time t."""
    b = malliavin_bundle(flow, system, kernel, t=t, cell_rule=cell_rule, with_weight=False)
    return b.Gamma, b.gamma, b.M, b.Minv


def malliavin_bundle(flow: FlowState, system: VectorFieldSystem, kernel: HKernelGrid | None = None,
                     t: float | None = None, cell_rule: str = "trapezoid", with_weight: bool = True,
                     keep_dbeta: bool = False) -> MalliavinBundle:
    """Assemble the Malliavin objects and, optionally, the first-order IBP weights.

    The weight is

        T*_{V_i} 1 = t^-2H sum_{k,l} [beta^i_k Minv_kl delta h_l
                                      - <D(beta^i_k Minv_kl), h_l>],

    with ``D Minv = -Minv (D M) Minv`` and ``D M`` built from ``D beta``.
    """
    if cell_rule not in CELL_RULES:
        raise DomainError(f"cell_rule must be one of {CELL_RULES}, got {cell_rule!r}")
    _require_nodes(flow)
    H = flow.H
    if not H > 0.5:
        raise DomainError("Malliavin weights require H > 1/2")
    if kernel is None:
        kernel = HKernelGrid(flow.times, H)
    if len(kernel.times) != len(flow.times) or not np.allclose(kernel.times, flow.times):
        raise DomainError("kernel grid does not match the flow nodes")
    K = len(flow.times) - 1 if t is None else _node_index(flow.times, t)
    if K == 0:
        raise DomainError("Malliavin objects need t > 0")
    t = float(flow.times[K])
    W = kernel.restrict(K)
    scale = t ** (2.0 * H)
    n = flow.X.shape[-1]

    beta = flow.beta[:, : K + 1]
    X = flow.X[:, : K + 1]
    J_t = flow.J[:, K]
    c = flow.Jinv[:, : K + 1] @ system.V(X)  # [s, b, m] = (J_s^-1 V_m(X_s))^b
    h = _cells(beta, cell_rule)
    cc = _cells(c, cell_rule)
    DX = np.einsum("pab,psbm->psma", J_t, cc)
    G = np.einsum("ab,pbql->paql", W, h)
    M = np.einsum("paqk,paql->pkl", h, G) / scale
    Gc = np.einsum("ab,pbik->paik", W, cc)
    gamma = np.einsum("paik,pajk->pij", cc, Gc)
    Gamma = J_t @ gamma @ np.swapaxes(J_t, -1, -2)

    with np.errstate(all="ignore"):
        condM = np.linalg.cond(M)
    ok = flow.ok & np.isfinite(condM) & (condM < M_COND_LIMIT)
    Msafe = np.where(ok[:, None, None], M, np.eye(n))
    Minv = np.linalg.inv(Msafe)
    Minv[~ok] = np.nan

    bundle = MalliavinBundle(t, K, H, cell_rule, W, flow.beta[:, K], J_t, flow.X[:, K], h, G, DX,
                             Gamma, gamma, M, Minv, ok)
    if not with_weight:
        return bundle

    dB = np.diff(flow.B[:, : K + 1], axis=1)
    young = np.einsum("paql,paq->pl", h, dB)
    Y = dbeta_all(_masked(flow, ok), system, K)
    mask = np.arange(K + 1)[None, :] > np.arange(K)[:, None]  # v > s_b
    if cell_rule == "trapezoid":
        DB = 0.5 * (Y[:, :-1] + Y[:, 1:])
    else:
        DB = Y[:, :-1].copy()
    DB *= mask[None, :, None, :, None, None]
    del Y
    # The cell values D h[b, m, a] average DB over the nodes of cell a; the
    # contractions below are linear in them, so the averaging is moved onto
    # the node weights instead of materialising D h.
    P = DB.shape[0]
    Wn = _to_nodes(W, cell_rule)  # [v, b]
    diag = np.einsum("pbqvql->pbvl", DB)
    trace = np.tensordot(diag, Wn.T, axes=([1, 2], [0, 1]))
    delta_h = young - trace
    Gn = _to_nodes(G, cell_rule, axis=1)  # [p, v, q, l]
    lhs = DB.reshape(P, K * n, (K + 1) * n, n).transpose(0, 1, 3, 2)
    term = np.matmul(lhs, Gn.reshape(P, 1, (K + 1) * n, n)).reshape(P, K, n, n, n)
    DM = (term + np.swapaxes(term, -1, -2)) / scale
    DMinv = -np.einsum("pkr,pbmrs,psl->pbmkl", Minv, DM, Minv, optimize=True)
    DBt = DB[:, :, :, K]
    corr = (np.einsum("pbmik,pkl,pbml->pi", DBt, Minv, G, optimize=True)
            + np.einsum("pik,pbmkl,pbml->pi", bundle.beta_t, DMinv, G, optimize=True))
    main = np.einsum("pik,pkl,pl->pi", bundle.beta_t, Minv, delta_h)
    bundle.young = young
    bundle.delta_h = delta_h
    bundle.weight = (main - corr) / scale
    # Phi = alpha^i_k: T*_{V_k}(Phi) = Phi T*_{V_k}1 - t^-2H sum beta^k_j Minv_jl <D Phi, h_l>
    alpha_t = np.linalg.inv(np.where(ok[:, None, None], bundle.beta_t, np.eye(n)))
    Dalpha = -np.einsum("pir,pbmrs,psk->pbmik", alpha_t, DBt, alpha_t, optimize=True)
    pair = np.einsum("pbmik,pbml->pikl", Dalpha, G, optimize=True)
    corr_alpha = np.einsum("pkj,pjl,pikl->pi", bundle.beta_t, Minv, pair, optimize=True)
    bundle.gradient_weight = np.einsum("pik,pk->pi", alpha_t, bundle.weight) - corr_alpha / scale
    if keep_dbeta:
        bundle.DB = DB
    return bundle


def _to_nodes(cell_weights, rule, axis=0):
    """Adjoint of the cell rule: node weights ``y`` with sum_a x_a c_a = sum_v y_v D_v."""
    c = np.moveaxis(np.asarray(cell_weights), axis, 0)
    out = np.zeros((c.shape[0] + 1,) + c.shape[1:])
    if rule == "trapezoid":
        out[:-1] += 0.5 * c
        out[1:] += 0.5 * c
    else:
        out[:-1] = c
    return np.moveaxis(out, 0, axis)


def _masked(flow: FlowState, ok):
    """Replace rejected paths by the identity state so kernels see finite data."""
    if ok.all():
        return flow
    import copy

    f = copy.copy(flow)
    n = flow.X.shape[-1]
    f.X = np.where(ok[:, None, None], flow.X, 0.0)
    f.B = np.where(ok[:, None, None], flow.B, 0.0)
    for name in ("J", "Jinv", "alpha", "beta"):
        setattr(f, name, np.where(ok[:, None, None, None], getattr(flow, name), np.eye(n)))
    return f


def skorokhod_h(flow: FlowState, system: VectorFieldSystem, kernel: HKernelGrid | None = None,
                t: float | None = None, i: int | None = None, cell_rule: str = "trapezoid") -> np.ndarray:
    """delta h_i = int beta_i dB - H(2H-1) iint D_u beta_i(v) |u - v|^(2H-2) du dv."""
    b = malliavin_bundle(flow, system, kernel, t=t, cell_rule=cell_rule)
    return b.delta_h if i is None else b.delta_h[:, i]


def ibp_weight(flow: FlowState, system: VectorFieldSystem, kernel: HKernelGrid | None = None,
               t: float | None = None, i: int | None = None, cell_rule: str = "trapezoid") -> np.ndarray:
    """First-order integration-by-parts weight T*_{V_i} 1 per path."""
    b = malliavin_bundle(flow, system, kernel, t=t, cell_rule=cell_rule)
    return b.weight if i is None else b.weight[:, i]


def reconstruct_vif(bundle: MalliavinBundle, grad_f, system: VectorFieldSystem):
    """V_i f(X_t) two ways: through the Malliavin matrix and directly.

    Returns ``(rep, direct)``, each (P, n): ``rep`` is
    ``t^-2H sum_{j,l} beta^i_j Minv_jl <D f(X_t), h_l>`` with
    ``D_b^m f(X_t) = <grad f(X_t), D^m_b X_t>``; ``direct`` is
    ``<grad f(X_t), V_i(X_t)>``.
    """
    g = np.asarray(grad_f(bundle.X_t), dtype=float)
    Df = np.einsum("pa,pbma->pbm", g, bundle.DX)
    pair = bundle.h_pairing(Df)
    rep = np.einsum("pij,pjl,pl->pi", bundle.beta_t, bundle.Minv, pair) / bundle.scale
    direct = np.einsum("pa,pai->pi", g, system.V(bundle.X_t))
    return rep, direct


def degenerate_check(bundle: MalliavinBundle):
    if not bundle.ok.all():
        bad = np.flatnonzero(~bundle.ok)
        raise DegenerateMalliavinError(f"degenerate Malliavin matrix on paths {bad[:10].tolist()}")
