import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.signal import fftconvolve

from fbmlab.errors import DegenerateMalliavinError, DomainError
from fbmlab.fbm import SeedSpec, TimeGrid, fbm_covariance, sample_fbm_batch
from fbmlab.flow import DriverPath, integrate_flow
from fbmlab.malliavin import (HKernelGrid, covariance_matrices, degenerate_check, h_inner_product, ibp_weight,
                              indicator, malliavin_bundle, malliavin_derivative_X, propagate_dbeta,
                              reconstruct_vif, skorokhod_h)
from fbmlab.estimators import sin_cos_function
from fbmlab.systems import constant_frame, identity_frame, rotation_frame, shear_frame

from conftest import make_flow


def _lag_weights(M, H, d):
    """alpha_H * int int |u - v|^(2H-2) over subcell pairs at every lag, by quadrature."""
    p = 2 * H - 2
    k = np.empty(M)
    for L in (0, 1):
        f = lambda z: (1 - abs(z)) * abs(L + z) ** p
        k[L] = integrate.quad(f, -1, 0, limit=200)[0] + integrate.quad(f, 0, 1, limit=200)[0]
    x, w = np.polynomial.legendre.leggauss(40)
    xs, ws = 0.5 * (x + 1), 0.5 * w
    L = np.arange(2, M)[:, None]
    k[2:] = (ws * (1 - xs) * (L + xs) ** p).sum(1) + (ws * (1 - xs) * (L - xs) ** p).sum(1)
    return H * (2 * H - 1) * d ** (2 * H) * k


def _fine_inner_product(f, g, times, H, M=10000):
    d = times[-1] / M
    idx = np.searchsorted(times, (np.arange(M) + 0.5) * d, side="right") - 1
    k = _lag_weights(M, H, d)
    kern = np.concatenate([k[::-1], k[1:]])
    return sum(f[idx, q] @ fftconvolve(g[idx, q], kern)[M - 1: 2 * M - 1] for q in range(f.shape[1]))


@pytest.mark.parametrize("H", [0.6, 0.75, 0.9])
def test_indicator_weights_are_exact(H):
    k = HKernelGrid(TimeGrid(1.0, 512).times, H)
    t = k.times[1:]
    S = np.cumsum(np.cumsum(k.weights, axis=0), axis=1)  # S[a, b] = <1_[0,t_a+1], 1_[0,t_b+1]>
    # rounding of sums over up to 512**2 cell weights
    assert np.abs(S - fbm_covariance(t[:, None], t[None, :], H)).max() <= 1e-12


@given(H=st.floats(0.51, 0.99), N=st.sampled_from([2, 8, 32]))
@settings(max_examples=30, deadline=None)
def test_weights_symmetric(H, N):
    w = HKernelGrid(np.linspace(0, 0.7, N + 1), H).weights
    assert np.array_equal(w, w.T)


def test_inner_product_examples():
    k = HKernelGrid(TimeGrid(1.0, 16).times, 0.7)
    one_t, one_s = indicator(0.5, k), indicator(0.25, k)
    assert h_inner_product(one_t, one_t, k) == pytest.approx(0.5 ** 1.4, abs=1e-14)
    assert h_inner_product(one_t, one_s, k) == pytest.approx(fbm_covariance(0.25, 0.5, 0.7), abs=1e-14)
    with pytest.raises(DomainError):
        h_inner_product(np.ones(8), np.ones(8), k)


@pytest.mark.parametrize("H", [0.6, 0.75, 0.9])
def test_inner_product_matches_fine_quadrature(H):
    r = np.random.default_rng(int(H * 100))
    times = TimeGrid(1.0, 8).times
    f, g = r.normal(size=(2, 8, 2))
    exact = h_inner_product(f, g, HKernelGrid(times, H))
    assert exact == pytest.approx(_fine_inner_product(f, g, times, H), rel=1e-4)


def test_derivative_of_X_examples():
    s = shear_frame()
    fl = make_flow(s, [0.4, 0.1], N=16, paths=3)
    t, u = fl.times[10], fl.times[12]
    assert np.all(malliavin_derivative_X(fl, s, u, t, 1) == 0)
    # J_t Jinv_t = I up to the integrator's own inverse residual
    tol = 2 * fl.inverse_residual().max()
    assert np.abs(malliavin_derivative_X(fl, s, t, t, 1) - s.V(fl.X[:, 10])[..., 1]).max() <= tol
    fl_id = make_flow(identity_frame(2), [0.0, 0.0], N=16, paths=2)
    for u in fl_id.times[:9]:
        assert np.array_equal(malliavin_derivative_X(fl_id, identity_frame(2), u, fl_id.times[8], 0),
                              np.tile([1.0, 0.0], (2, 1)))


def test_identity_frame_bundle():
    H, t = 0.75, 0.5
    fl = make_flow(identity_frame(2), [0.0, 0.0], H=H, T=t, N=32, paths=5)
    b = malliavin_bundle(fl, identity_frame(2))
    eye = np.broadcast_to(np.eye(2), b.M.shape)
    assert np.allclose(b.M, eye, atol=1e-13) and np.allclose(b.gamma, t ** (2 * H) * eye, atol=1e-13)
    assert np.allclose(b.Gamma, t ** (2 * H) * eye, atol=1e-13)
    assert np.allclose(b.delta_h, fl.B[:, -1], atol=1e-13)
    assert np.allclose(b.weight, fl.B[:, -1] / t ** (2 * H), atol=1e-12)
    assert np.allclose(b.gradient_weight, b.weight, atol=1e-12)
    assert np.allclose(skorokhod_h(fl, identity_frame(2), i=1), fl.B[:, -1, 1], atol=1e-13)
    assert np.allclose(ibp_weight(fl, identity_frame(2), i=0), b.weight[:, 0])


def test_constant_frame_matrices():
    s = constant_frame()
    H, t = 0.8, 1.0
    fl = make_flow(s, [1.0, 2.0], H=H, N=16, paths=3)
    Gamma, gamma, M, Minv = covariance_matrices(fl, s, HKernelGrid(fl.times, H))
    V = s.V(np.zeros(2))
    assert np.allclose(M, np.eye(2), atol=1e-12)
    assert np.allclose(Gamma, t ** (2 * H) * V @ V.T, atol=1e-12)


@pytest.mark.parametrize("system", [shear_frame(), rotation_frame()], ids=lambda s: s.name)
def test_two_route_matrix_identity(system):
    x0 = np.array([0.5, -0.3])
    fl = make_flow(system, x0, N=256, paths=4, substeps=16)
    b = malliavin_bundle(fl, system, with_weight=False)
    V = system.V(x0)
    lhs = V @ b.M @ V.T
    Jinv = np.linalg.inv(b.J_t)
    rhs = Jinv @ b.Gamma @ np.swapaxes(Jinv, -1, -2) / b.scale
    assert np.abs(lhs - rhs).max() <= 1e-6


def test_dbeta_vanishes_without_brackets():
    fl = make_flow(constant_frame(), [0.0, 0.0], N=16, paths=2)
    assert np.all(propagate_dbeta(fl, constant_frame(), fl.times[3], 0) == 0)


def test_dbeta_jump_and_adaptedness():
    s = shear_frame()
    fl = make_flow(s, [0.3, 0.0], N=16, paths=3)
    u = 5
    Y = propagate_dbeta(fl, s, fl.times[u], 1)
    assert np.all(Y[:, :u] == 0)
    om = s.omega(fl.X[:, u])
    jump = np.einsum("pik,pkj->pij", om[:, 1], fl.beta[:, u])  # sum_k omega_{mi}^k beta^k_j
    assert np.allclose(Y[:, u], jump, atol=1e-14)


def test_dbeta_one_step_expansion():
    """Heun step of the linearised equation from the jump, written out by hand."""
    s = shear_frame()
    fl = make_flow(s, [0.3, 0.0], N=8, paths=2, substeps=1)
    u, m = 2, 0
    Y = propagate_dbeta(fl, s, fl.times[u], m)
    X, beta, J = fl.X, fl.beta, fl.J
    dB = fl.B[:, u + 1] - fl.B[:, u]
    DX_u = (fl.Jinv[:, u] @ s.V(X[:, u]))[..., m]  # (J_u^-1 V_m(X_u)); D X_v = J_v times this

    def rhs(v, Yv):
        Om = np.einsum("pl,plik->pik", dB, s.omega(X[:, v]))
        dOm = np.einsum("pl,plikb,pb->pik", dB, s.domega(X[:, v]), np.einsum("pab,pb->pa", J[:, v], DX_u))
        return Om @ Yv + dOm @ beta[:, v]

    Y0 = Y[:, u]
    k1 = rhs(u, Y0)
    k2 = rhs(u + 1, Y0 + k1)
    assert np.allclose(Y[:, u + 1], Y0 + 0.5 * (k1 + k2), atol=1e-14)


@pytest.mark.parametrize("system", [shear_frame(), rotation_frame()], ids=lambda s: s.name)
def test_derivatives_match_driver_perturbation(system):
    H, x0, b_cell, m, eps = 0.75, [0.3, -0.2], 20, 1, 1e-6
    g = TimeGrid(0.5, 64)
    B = sample_fbm_batch(g, H, 2, SeedSpec(1), range(4))
    fl = integrate_flow(system, DriverPath.from_samples(g, B, H), x0, substeps=1)
    bundle = malliavin_bundle(fl, system, keep_dbeta=True)
    B2 = B.copy()
    B2[:, b_cell + 1:, m] += eps  # bump the increment of one cell
    fl2 = integrate_flow(system, DriverPath.from_samples(g, B2, H), x0, substeps=1)
    fd_beta = (fl2.beta[:, -1] - fl.beta[:, -1]) / eps
    fd_X = (fl2.X[:, -1] - fl.X[:, -1]) / eps
    scale = max(1.0, np.abs(fd_beta).max())
    assert np.abs(fd_beta - bundle.DB[:, b_cell, m, -1]).max() <= 5e-3 * scale
    assert np.abs(fd_X - bundle.DX[:, b_cell, m]).max() <= 1e-3


def _explicit_weights(bundle):
    """delta h and T*1 from a materialised D h, following the weight formula term by term."""
    W, h, DB, H, t = bundle.W, bundle.h, bundle.DB, bundle.H, bundle.t
    scale = t ** (2 * H)
    if bundle.rule == "trapezoid":
        Dh = 0.5 * (DB[:, :, :, :-1] + DB[:, :, :, 1:])  # [p, b, m, a, q, l]
    else:
        Dh = DB[:, :, :, :-1]
    delta_h = bundle.young - np.einsum("ab,pbmaml->pl", W, Dh)
    DM = (np.einsum("pbmaqk,ac,pcql->pbmkl", Dh, W, h) + np.einsum("paqk,ac,pbmcql->pbmkl", h, W, Dh)) / scale
    Minv = bundle.Minv
    DMinv = -np.einsum("pkr,pbmrs,psl->pbmkl", Minv, DM, Minv)
    beta, DBt = bundle.beta_t, DB[:, :, :, -1]
    D_coef = np.einsum("pbmik,pkl->pbmikl", DBt, Minv) + np.einsum("pik,pbmkl->pbmikl", beta, DMinv)
    corr = np.einsum("pbmikl,pba,paml->pi", D_coef, np.broadcast_to(W, (len(h),) + W.shape), h)
    weight = (np.einsum("pik,pkl,pl->pi", beta, Minv, delta_h) - corr) / scale
    return delta_h, weight


@pytest.mark.parametrize("rule", ["trapezoid", "left"])
def test_weight_contractions_match_explicit_formula(rule):
    s = shear_frame()
    fl = make_flow(s, [0.5, 0.0], T=0.5, N=16, paths=3)
    b = malliavin_bundle(fl, s, cell_rule=rule, keep_dbeta=True)
    delta_h, weight = _explicit_weights(b)
    assert np.allclose(b.delta_h, delta_h, rtol=1e-12, atol=1e-12)
    assert np.allclose(b.weight, weight, rtol=1e-12, atol=1e-12)


def test_bundle_at_interior_time_equals_truncated_flow():
    s = shear_frame()
    fl = make_flow(s, [0.5, 0.0], T=1.0, N=16, paths=2)
    b = malliavin_bundle(fl, s, t=0.5)
    short = make_flow(s, [0.5, 0.0], T=1.0, N=16, paths=2)
    for name in ("times", "X", "J", "Jinv", "alpha", "beta", "B"):
        setattr(short, name, getattr(short, name)[:, :9] if name != "times" else short.times[:9])
    ref = malliavin_bundle(short, s)
    assert np.allclose(b.weight, ref.weight, rtol=1e-12) and np.allclose(b.M, ref.M, rtol=1e-12)


def test_reconstruct_trivial_cases():
    s = identity_frame(2)
    fl = make_flow(s, [0.2, 0.1], T=0.5, N=16, paths=3)
    b = malliavin_bundle(fl, s, with_weight=False)
    rep, direct = reconstruct_vif(b, lambda y: np.tile([2.0, -1.0], (len(y), 1)), s)
    assert np.allclose(rep, direct, atol=1e-12) and np.allclose(direct, [2.0, -1.0])
    rep, direct = reconstruct_vif(b, lambda y: np.zeros_like(y), s)
    assert np.all(rep == 0) and np.all(direct == 0)


def test_reconstruct_on_shear_improves_with_refinement():
    s = shear_frame()
    f = sin_cos_function()
    g = TimeGrid(0.5, 256)
    B = sample_fbm_batch(g, 0.75, 2, SeedSpec(7), range(6))
    errs = []
    for level in (7, 8):
        fl = integrate_flow(s, DriverPath.from_samples(g, B, 0.75, level=level), [0.5, 0.0])
        rep, direct = reconstruct_vif(malliavin_bundle(fl, s, with_weight=False), f.gradient, s)
        errs.append(np.linalg.norm(rep - direct, axis=1) / np.linalg.norm(direct, axis=1))
    assert errs[0].max() <= 1e-2
    assert errs[1].max() < errs[0].max()


def test_validation_errors():
    s = shear_frame()
    fl = make_flow(s, [0.5, 0.0], N=8, paths=2)
    with pytest.raises(DomainError):
        malliavin_bundle(fl, s, cell_rule="midpoint")
    with pytest.raises(DomainError):
        malliavin_bundle(fl, s, t=0.0)
    with pytest.raises(DomainError):
        malliavin_bundle(fl, s, kernel=HKernelGrid(np.linspace(0, 1, 5), 0.75))
    b = malliavin_bundle(fl, s, with_weight=False)
    b.ok[0] = False
    with pytest.raises(DegenerateMalliavinError):
        degenerate_check(b)
