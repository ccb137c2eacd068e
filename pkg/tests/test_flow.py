import numpy as np
import pytest

from fbmlab.errors import DomainError
from fbmlab.fbm import SeedSpec, TimeGrid, sample_fbm, sample_fbm_batch
from fbmlab.flow import (DriverPath, exponential_alpha_update, integrate_flow, midpoint_omega,
                         orthogonality_excess, refine_convergence)
from fbmlab.systems import (constant_frame, identity_frame, levi_civita_generators, linear_field_1d,
                            make_system, rotation_frame, shear_frame, synthetic_omega_system)

from conftest import make_flow

CATALOG = [identity_frame(2), constant_frame(), make_system("rotated"), shear_frame(), rotation_frame()]


def _nested(system, H, top, paths, seed=3):
    g = TimeGrid(1.0, 2 ** top)
    return g, sample_fbm_batch(g, H, system.dim, SeedSpec(seed), range(paths))


def test_driver_matches_samples_at_dyadic_nodes():
    g, B = _nested(identity_frame(1), 0.7, 6, 2)
    d = DriverPath.from_samples(g, B, 0.7, level=3)
    assert d.N == 8 and np.array_equal(d.values, B[:, ::8])
    assert np.allclose(d.slopes * g.T / 8, d.increments)
    with pytest.raises(DomainError):
        DriverPath.from_samples(g, B, 0.7, level=7)


def test_identity_frame_flow_is_translation():
    fl = make_flow(identity_frame(2), [0.3, -1.0], N=32)
    assert np.allclose(fl.X, fl.x0[:, None] + fl.B, atol=1e-14)
    for M in (fl.J, fl.Jinv, fl.alpha, fl.beta):
        assert np.array_equal(M, np.broadcast_to(np.eye(2), M.shape))


def test_linear_field_closed_form():
    a, x0 = 0.7, 1.3
    errs = []
    for substeps in (4, 16):
        fl = make_flow(linear_field_1d(a), [x0], N=256, paths=8, substeps=substeps)
        expB = np.exp(a * fl.B[..., 0])
        errs.append(np.abs(fl.X[..., 0] / (x0 * expB) - 1).max())
        assert np.abs(fl.J[..., 0, 0] / expB - 1).max() <= 1e-4
    assert errs[0] <= 1e-4
    # Heun is third order locally on each linear piece
    assert errs[0] / errs[1] >= 0.5 * 4 ** 2


def test_shear_frame_consistency_at_256():
    fl = make_flow(shear_frame(), [0.5, 0.0], N=256, paths=8)
    assert fl.frame_residual(shear_frame()).max() <= 1e-4


@pytest.mark.parametrize("system", CATALOG, ids=lambda s: s.name)
def test_inverse_and_duality_invariants(system):
    fl = make_flow(system, [0.5, 0.2], N=256, paths=8)
    assert fl.ok.all()
    assert fl.inverse_residual().max() <= 1e-6
    assert fl.duality_residual().max() <= 1e-6
    assert fl.frame_residual(system).max() <= 1e-4
    assert fl.rel_beta_residual(system).max() <= 1e-4


def test_frame_residual_shrinks_faster_with_heun():
    s, H = shear_frame(), 0.75
    g, B = _nested(s, H, 9, 8)
    res = {}
    for scheme in ("euler", "heun"):
        res[scheme] = [integrate_flow(s, DriverPath.from_samples(g, B, H, level=m), [0.5, 0.0], scheme=scheme,
                                      substeps=1).frame_residual(s).max() for m in (6, 7, 8, 9)]
    euler, heun = np.array(res["euler"]), np.array(res["heun"])
    assert np.all(np.diff(euler) < 0) and np.all(np.diff(heun) < 0)
    assert np.all(heun < euler)
    # Euler on a rough driver converges like mesh^(2H - 1)
    assert euler[0] / euler[-1] >= 0.8 * 2 ** (3 * (2 * H - 1))


def test_exponential_update_trivial_and_orthogonal():
    g, B = _nested(identity_frame(3), 0.7, 7, 3)
    d = DriverPath.from_samples(g, B, 0.7)
    assert np.array_equal(exponential_alpha_update(np.zeros((d.N, 3, 3, 3)), d),
                          np.broadcast_to(np.eye(3), (3, d.N + 1, 3, 3)))
    om = 1.7 * levi_civita_generators()
    alpha = exponential_alpha_update(np.broadcast_to(om, (d.N,) + om.shape), d)
    gram = np.swapaxes(alpha, -1, -2) @ alpha
    assert np.abs(gram - np.eye(3)).max() <= 1e-12
    assert abs(orthogonality_excess(alpha)) <= 1e-12
    with pytest.raises(DomainError):
        exponential_alpha_update(np.zeros((d.N + 1, 3, 3, 3)), d)


def test_exponential_update_matches_integrated_alpha_for_synthetic_omega():
    om = levi_civita_generators()
    s = synthetic_omega_system(om)
    g, B = _nested(s, 0.75, 8, 4)
    d = DriverPath.from_samples(g, B, 0.75)
    exact = exponential_alpha_update(np.broadcast_to(om, (d.N,) + om.shape), d)
    errs = [np.abs(integrate_flow(s, d, np.zeros(3), substeps=k).alpha - exact).max() for k in (4, 16)]
    assert errs[0] <= 1e-4 and errs[1] < errs[0] / 8


def test_exponential_update_tracks_euler_on_shear():
    s, H = shear_frame(), 0.75
    g, B = _nested(s, H, 10, 10)
    gaps = []
    for m in (6, 8, 10):
        d = DriverPath.from_samples(g, B, H, level=m)
        euler = integrate_flow(s, d, [0.5, 0.0], scheme="euler", substeps=1)
        heun = integrate_flow(s, d, [0.5, 0.0], scheme="heun", substeps=1)
        gaps.append(np.abs(exponential_alpha_update(midpoint_omega(s, heun), d) - euler.alpha).max())
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[0] / gaps[2] >= 0.8 * 4 ** (2 * H - 1)


def test_non_finite_path_is_aborted_alone():
    x0 = np.array([[1.0], [1e-300], [1.0]])
    fl = make_flow(linear_field_1d(1e4), x0, N=128, paths=3, substeps=1)
    assert fl.ok.tolist() == [False, True, False] and len(fl.aborts) == 2
    assert np.isnan(fl.X[~fl.ok]).all()
    assert np.isfinite(fl.X[fl.ok]).all()


def test_flow_rejects_brownian_and_bad_scheme():
    g, B = _nested(identity_frame(1), 0.7, 3, 1)
    with pytest.raises(DomainError):
        integrate_flow(identity_frame(1), DriverPath(g.times, B, 0.5, 3), [0.0])
    with pytest.raises(DomainError):
        integrate_flow(identity_frame(1), DriverPath.from_samples(g, B, 0.7), [0.0], scheme="rk4")


def test_refinement_constant_frame_is_exact():
    p = sample_fbm(TimeGrid(1.0, 256), 0.75, 2, SeedSpec(4), 0)
    system = constant_frame()
    rep = refine_convergence(system, np.zeros(2), p, [4, 5, 6], gamma=0.5)
    # the flow is linear in the driver: it agrees at the shared dyadic nodes and
    # in between differs exactly by V times the gap of the two interpolations
    assert rep.node_sup_distance.max() <= 1e-12
    V = system.V(np.zeros(2))
    fine = np.linspace(0, 1, 2 ** 7 + 1)
    for j, m in enumerate([4, 5, 6]):
        interp = [np.stack([np.interp(fine, np.linspace(0, 1, 2 ** k + 1), p.values[c, :: 256 // 2 ** k])
                            for c in range(2)], axis=-1) for k in (m, m + 1)]
        gap = (interp[1] - interp[0]) @ V.T
        assert rep.sup_distance[0, j] == pytest.approx(np.abs(gap).max(), rel=1e-10)


def test_refinement_distances_shrink_with_gamma():
    p = sample_fbm(TimeGrid(1.0, 512), 0.75, 2, SeedSpec(4), 0)
    lo = refine_convergence(shear_frame(), [0.5, 0.0], p, [4, 5, 6], gamma=0.3)
    hi = refine_convergence(shear_frame(), [0.5, 0.0], p, [4, 5, 6], gamma=0.6)
    assert np.all(lo.holder_distance <= hi.holder_distance)
    assert np.all(lo.sup_distance == hi.sup_distance)
    with pytest.raises(DomainError):
        refine_convergence(shear_frame(), [0.5, 0.0], p, [4], gamma=0.8)
    with pytest.raises(DomainError):
        refine_convergence(shear_frame(), [0.5, 0.0], p, [9], gamma=0.5)


def test_refinement_distances_decrease_on_average():
    g, B = _nested(shear_frame(), 0.75, 9, 16)
    rep = refine_convergence(shear_frame(), [0.5, 0.0], (g, B, 0.75), [4, 5, 6, 7, 8], gamma=0.5)
    assert np.all(np.diff(np.log(rep.sup_distance).mean(axis=0)) < 0)


def test_trajectory_dump(tmp_path):
    fl = make_flow(shear_frame(), [0.1, 0.2], N=8, paths=1)
    text = fl.dump_csv(tmp_path / "flow.csv").read_text().splitlines()
    assert text[0] == "# X" and len(text) == 5 * (1 + 9)
    assert len(text[1 + 9 + 1].split(",")) == 1 + 4
