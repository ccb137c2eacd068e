import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbmlab.errors import ConfigError, DomainError, FrameDegenerateError
from fbmlab.systems import (CATALOG, VectorFieldSystem, brackets_from_frame, check_hypothesis_skew,
                            constant_frame, default_probe_points, expression_frame, frame_matrix,
                            identity_frame, levi_civita_generators, lie_bracket, make_system,
                            rotation_frame, shear_frame, structure_constants, synthetic_omega_system)

ANALYTIC = [identity_frame(2), identity_frame(3), constant_frame(), make_system("rotated", angle=0.3),
            shear_frame(), rotation_frame()]
points2 = st.lists(st.floats(-2, 2), min_size=2, max_size=2).map(np.array)


def test_identity_frame_matrix():
    fm = frame_matrix(identity_frame(3), np.zeros(3))
    assert np.array_equal(fm.V, np.eye(3)) and np.array_equal(fm.W, np.eye(3))


@given(x=points2)
def test_shear_determinant_is_one(x):
    fm = frame_matrix(shear_frame(), x)
    assert np.linalg.det(fm.V) == pytest.approx(1.0, abs=1e-14)
    assert np.allclose(fm.V @ fm.W, np.eye(2), atol=1e-10)


def test_degenerate_frame_raises():
    sys_ = constant_frame([[1.0, 1.0], [0.0, 0.0]])
    with pytest.raises(FrameDegenerateError):
        frame_matrix(sys_, np.zeros(2))


@given(x=points2)
def test_shear_bracket_and_omega(x):
    s = shear_frame()
    br = lie_bracket(s, 0, 1, x)
    assert np.allclose(br, [np.cos(x[0]), 0.0], atol=1e-14)
    assert np.allclose(lie_bracket(s, 1, 0, x), -br)
    om = structure_constants(s, x)
    assert om[0, 1, 0] == pytest.approx(np.cos(x[0]), abs=1e-14) and om[0, 1, 1] == 0.0


def test_constant_fields_have_zero_brackets():
    s = constant_frame()
    assert np.all(lie_bracket(s, 0, 1, np.ones(2)) == 0)
    assert np.all(structure_constants(s, np.ones(2)) == 0)
    with pytest.raises(DomainError):
        lie_bracket(s, 0, 2, np.ones(2))


@pytest.mark.parametrize("system", ANALYTIC, ids=lambda s: f"{s.name}{s.dim}")
def test_analytic_jacobians_match_central_differences(system):
    x = np.random.default_rng(1).uniform(-2, 2, size=(100, system.dim))
    h = 1e-5
    fd = np.stack([(system.V(x + h * e) - system.V(x - h * e)) / (2 * h) for e in np.eye(system.dim)], axis=-1)
    assert np.abs(system.dV(x) - np.moveaxis(fd, -2, -3)).max() <= 1e-6


@pytest.mark.parametrize("system", ANALYTIC, ids=lambda s: f"{s.name}{s.dim}")
def test_omega_reconstructs_brackets(system):
    x = default_probe_points(system.dim, count=50)
    om = system.omega(x)
    V = system.V(x)
    recon = np.einsum("pijk,pbk->pijb", om, V)
    assert np.abs(recon - brackets_from_frame(V, system.dV(x))).max() <= 1e-8
    assert np.array_equal(om, -np.swapaxes(om, 1, 2))


@pytest.mark.parametrize("system", ANALYTIC, ids=lambda s: f"{s.name}{s.dim}")
def test_analytic_omega_matches_frame_solve(system):
    from fbmlab.systems import omega_from_frame

    x = default_probe_points(system.dim)
    assert np.allclose(system.omega(x), omega_from_frame(system.V(x), system.dV(x)), atol=1e-12)
    h = 1e-5
    fd = np.stack([(system.omega(x + h * e) - system.omega(x - h * e)) / (2 * h) for e in np.eye(system.dim)],
                  axis=-1)
    assert np.abs(system.domega(x) - fd).max() <= 1e-6


def test_skew_hypothesis_catalog():
    pts = default_probe_points(2)
    assert check_hypothesis_skew(constant_frame(), pts).holds
    assert check_hypothesis_skew(identity_frame(2), pts).holds
    rep = check_hypothesis_skew(shear_frame(), pts)
    assert not rep.holds
    assert rep.max_violation == pytest.approx(2 * np.abs(np.cos(pts[:, 0])).max())


def test_levi_civita_generators_are_skew():
    om = levi_civita_generators()
    assert np.array_equal(om, -np.swapaxes(om, 1, 2))
    # omega[k, i, j] = eps_{ikj}
    assert om[0, 2, 1] == 1.0 and om[0, 1, 2] == -1.0
    s = synthetic_omega_system(om)
    assert s.synthetic and s.claims_hypothesis2


def test_expression_frame_matches_shear():
    e = expression_frame("1, 0; sin(x1), 1", 2)
    s = shear_frame()
    x = default_probe_points(2)
    assert e.fd_jacobians
    assert np.allclose(e.V(x), s.V(x))
    assert np.allclose(e.dV(x), s.dV(x), atol=1e-8)
    assert np.allclose(e.omega(x), s.omega(x), atol=1e-8)


@pytest.mark.parametrize("bad", ["1, 0; sin(x1)", "1, 0; __import__(x1), 1", "1, 0; x3, 1", "1, 0; (, 1"])
def test_expression_frame_rejects_bad_input(bad):
    with pytest.raises(ConfigError):
        expression_frame(bad, 2)


def test_make_system_catalog_and_fd_flag():
    assert set(CATALOG) >= {"identity", "constant", "shear", "rotation", "rotated"}
    with pytest.raises(ConfigError):
        make_system("nope")
    s = make_system("shear", analytic=False)
    assert s.fd_jacobians
    x = default_probe_points(2)
    assert np.allclose(s.omega(x), shear_frame().omega(x), atol=1e-8)
    assert make_system("constant", matrix=[1, 2, 3, 4]).V(np.zeros(2)).tolist() == [[1, 2], [3, 4]]
