import warnings

import numpy as np
import pytest

from eqfree import plant as pl
from eqfree import reduction as rd
from eqfree.krylov import jacobian_operator
from eqfree.textio import ArtifactFormatError


@pytest.fixture(scope="module")
def fd_stepper(cfg):
    return lambda u: pl.fd_timestepper(u, cfg)


@pytest.fixture(scope="module")
def fd_basis(fd_stepper, fd_fixed_point):
    return rd.slow_basis(fd_stepper, fd_fixed_point, 5, 40)


def _tangent_linear_H(u_ss, act, cfg):
    """Propagate d(state)/dz through the substeps, no finite differences involved."""
    g = cfg.grid
    lap = (np.diag(np.full(g.m - 1, 1.0), -1) - 2 * np.eye(g.m) + np.diag(np.full(g.m - 1, 1.0), 1)) / g.h**2
    u, dU = u_ss.copy(), np.zeros((g.m, act.k))
    for _ in range(cfg.substeps):
        step = dU + cfg.dt_inner * (lap @ dU + cfg.lam * np.exp(u)[:, None] * dU + act.B)
        step[[0, -1]] = 0.0
        u = pl.fd_step(u, cfg)
        dU = step
    return dU


# -- slow basis -------------------------------------------------------------------


def test_slow_basis_diagonal(rng):
    J = np.diag([2.0, 0.5, 0.1])
    b = rd.slow_basis(lambda u: J @ u, np.zeros(3), 1, 3, v0=rng.standard_normal(3))
    np.testing.assert_allclose(np.abs(b.V[:, 0]), [1, 0, 0], atol=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_slow_basis_complex_pair(seed):
    rng = np.random.default_rng(seed)
    Qr, _ = np.linalg.qr(rng.standard_normal((12, 12)))
    A0 = np.diag(rng.uniform(0.0, 0.3, 12))
    A0[:2, :2] = [[0.9, -0.5], [0.5, 0.9]]
    A = Qr @ A0 @ Qr.T
    b = rd.slow_basis(lambda u: A @ u, np.zeros(12), 2, 12, seed=seed)
    assert b.V.shape == (12, 2)
    AV = A @ b.V
    assert np.linalg.norm(AV - b.V @ (b.V.T @ AV)) <= 1e-6


def test_slow_basis_straddling_pair_expands():
    A = np.diag([0.95, 0.1, 0.05, 0.02])
    A[1:3, 1:3] = [[0.6, -0.3], [0.3, 0.6]]
    with pytest.warns(UserWarning, match="straddles"):
        b = rd.slow_basis(lambda u: A @ u, np.zeros(4), 2, 4)
    assert b.expanded and b.M_slow == 3 and b.V.shape == (4, 3)


def test_slow_basis_rejects_bad_sizes():
    with pytest.raises(ValueError):
        rd.slow_basis(lambda u: u, np.zeros(4), 5, 4)


def test_bratu_slow_subspace(fd_stepper, fd_fixed_point, fd_basis):
    V = fd_basis.V
    assert np.abs(V.T @ V - np.eye(5)).max() <= 1e-10
    J = jacobian_operator(fd_stepper, fd_fixed_point)
    JV = np.column_stack([J.matvec(V[:, j]) for j in range(5)])
    assert np.linalg.norm(JV - V @ (V.T @ JV)) <= 1e-5


def test_bratu_F_matches_ritz(fd_stepper, fd_fixed_point, fd_basis):
    F = rd.reduced_F(fd_stepper, fd_fixed_point, fd_basis.V)
    eig = np.sort_complex(np.linalg.eigvals(F))
    ritz = np.sort_complex(fd_basis.ritz_values)
    assert np.abs(eig - ritz).max() <= 1e-6


# -- reduced F ----------------------------------------------------------------------


def test_F_linear_invariant_subspace(rng):
    Qr, _ = np.linalg.qr(rng.standard_normal((10, 10)))
    lam = np.array([0.9, 0.7, 0.5, 0.3, 0.2, 0.1, 0.05, 0.04, 0.03, 0.02])
    A = Qr @ np.diag(lam) @ Qr.T
    F = rd.reduced_F(lambda u: A @ u, np.zeros(10), Qr[:, :3])
    np.testing.assert_allclose(np.sort(np.linalg.eigvals(F).real), [0.5, 0.7, 0.9], atol=1e-8)


def test_F_full_basis_is_jacobian(fd_stepper, fd_fixed_point):
    F = rd.reduced_F(fd_stepper, fd_fixed_point, np.eye(51))
    J = jacobian_operator(fd_stepper, fd_fixed_point)
    dense = np.column_stack([J.matvec(e) for e in np.eye(51)])
    np.testing.assert_allclose(F, dense, rtol=0, atol=1e-6 * np.abs(dense).max())


def test_reduced_consistency_quadratic(fd_stepper, fd_fixed_point, fd_basis):
    V = fd_basis.V
    F = rd.reduced_F(fd_stepper, fd_fixed_point, V)
    y = np.array([1.0, -0.5, 0.3, 0.2, -0.1])
    errs = []
    for s in (1e-4, 5e-5):
        d = s * V @ y / np.linalg.norm(y)
        errs.append(np.linalg.norm(V.T @ (fd_stepper(fd_fixed_point + d) - fd_fixed_point) - F @ (V.T @ d)))
    assert errs[0] <= 1e-6
    # second-order remainder: halving delta cuts the defect by about 4 (until roundoff)
    assert errs[1] <= errs[0] / 2


def test_basis_invariance(fd_stepper, fd_fixed_point, fd_basis, rng):
    V = fd_basis.V
    R, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    F1 = rd.reduced_F(fd_stepper, fd_fixed_point, V)
    F2 = rd.reduced_F(fd_stepper, fd_fixed_point, V @ R)
    np.testing.assert_allclose(np.sort_complex(np.linalg.eigvals(F1)), np.sort_complex(np.linalg.eigvals(F2)), atol=1e-9)


# -- actuator derivative ------------------------------------------------------------


def test_surrogate_H_is_B(act, fd_fixed_point):
    H = rd.actuator_jacobian_H("surrogate", fd_fixed_point, act)
    assert H.tobytes() == act.B.tobytes()


def test_fd_H_matches_tangent_linear(act, cfg, fd_fixed_point):
    H = rd.actuator_jacobian_H("fd", fd_fixed_point, act, cfg)
    oracle = _tangent_linear_H(fd_fixed_point, act, cfg)
    assert np.abs(H - oracle).max() <= 1e-6 * np.abs(oracle).max()


def test_fd_H_leading_order(act, cfg, fd_fixed_point):
    H = rd.actuator_jacobian_H("fd", fd_fixed_point, act, cfg)
    dtB = cfg.dt_report * act.B
    assert np.all(H[[0, -1]] == 0)
    # leading-order Duhamel term plus an O(dt^2) remainder; the remainder
    # constant is the operator norm of the generator acting on B
    gap = np.abs(H - dtB).max() / np.abs(dtB).max()
    assert gap <= 0.15
    half = pl.PlantConfig(dt_report=5e-4, dt_inner=5e-5)
    H_half = rd.actuator_jacobian_H("fd", fd_fixed_point, act, half)
    gap_half = np.abs(H_half - half.dt_report * act.B).max() / np.abs(half.dt_report * act.B).max()
    assert 1.7 < gap / gap_half < 2.3


def test_fd_H_eps_insensitive(act, cfg, fd_fixed_point):
    a = rd.actuator_jacobian_H("fd", fd_fixed_point, act, cfg, eps=1e-5)
    b = rd.actuator_jacobian_H("fd", fd_fixed_point, act, cfg, eps=2e-5)
    assert np.abs(a - b).max() / np.abs(a).max() < 1e-6


def test_H_errors(act, cfg, fd_fixed_point):
    with pytest.raises(ValueError):
        rd.actuator_jacobian_H("spectral", fd_fixed_point, act, cfg)
    with pytest.raises(ValueError):
        rd.actuator_jacobian_H("fd", fd_fixed_point, act)
    with pytest.raises(ValueError):
        rd.actuator_jacobian_H("fd", fd_fixed_point, act, cfg, eps=0.0)


# -- reduced D and projection -------------------------------------------------------


def test_D_consistent_orthonormal(rng):
    V, _ = np.linalg.qr(rng.standard_normal((20, 4)))
    H = rng.standard_normal((20, 3))
    np.testing.assert_allclose(rd.reduced_D(V, H), V.T @ H, atol=1e-12)


def test_D_modes_coincide_for_diagonal_F(rng):
    V, _ = np.linalg.qr(rng.standard_normal((20, 3)))
    H = rng.standard_normal((20, 2))
    F = np.diag([0.9, 0.5, 0.2])
    a = rd.reduced_D(V, H, F, "consistent")
    b = rd.reduced_D(V, H, F, "paper_vf")
    np.testing.assert_allclose(np.abs(b), np.abs(a), atol=1e-12)


def test_D_defective_falls_back(rng):
    V, _ = np.linalg.qr(rng.standard_normal((6, 2)))
    H = rng.standard_normal((6, 1))
    with pytest.warns(UserWarning, match="singular"):
        D = rd.reduced_D(V, H, np.array([[1.0, 1.0], [0.0, 1.0]]), "paper_vf")
    np.testing.assert_allclose(D, V.T @ H, atol=1e-12)


def test_D_bad_mode(rng):
    with pytest.raises(ValueError):
        rd.reduced_D(np.eye(3), np.eye(3), mode="other")
    with pytest.raises(ValueError):
        rd.reduced_D(np.eye(3), np.eye(3), mode="paper_vf")


def _toy_model(rng, n=15, M=3):
    V, _ = np.linalg.qr(rng.standard_normal((n, M)))
    return rd.ReducedModel(rng.standard_normal(n), V, np.eye(M), np.zeros((n, 2)), np.zeros((M, 2)))


def test_project(rng):
    model = _toy_model(rng)
    np.testing.assert_array_equal(rd.project(model.u_ss, model), 0.0)
    for j in range(3):
        np.testing.assert_allclose(rd.project(model.u_ss + model.V[:, j], model), np.eye(3)[j], atol=1e-14)
    w = rng.standard_normal(15)
    w -= model.V @ (model.V.T @ w)
    assert np.abs(rd.project(model.u_ss + w, model)).max() <= 1e-10
    assert rd.project(np.tile(model.u_ss, (4, 1)), model).shape == (4, 3)
    with pytest.raises(ValueError):
        rd.project(np.zeros(14), model)


def test_model_round_trip(tmp_path, rng):
    model = _toy_model(rng)
    model.provenance = {"plant": "fd"}
    model.save(tmp_path / "r.json")
    back = rd.ReducedModel.load(tmp_path / "r.json")
    for name in ("u_ss", "V", "F", "H", "D"):
        assert getattr(back, name).tobytes() == getattr(model, name).tobytes()
    assert back.d_mode == "consistent" and back.provenance == {"plant": "fd"}


def test_model_load_missing_field(tmp_path):
    from eqfree import textio

    textio.write_document(tmp_path / "r.json", "reduced_model", {"u_ss": [0.0]})
    with pytest.raises(ArtifactFormatError):
        rd.ReducedModel.load(tmp_path / "r.json")


def test_build_reduced_model(fd_stepper, fd_fixed_point, act, cfg):
    H = rd.actuator_jacobian_H("fd", fd_fixed_point, act, cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        model, basis = rd.build_reduced_model(fd_stepper, fd_fixed_point, H, provenance={"plant": "fd"})
    assert model.F.shape == (5, 5) and model.D.shape == (5, 3)
    assert np.all(np.isfinite(model.D))
    assert model.provenance["plant"] == "fd" and model.provenance["M_slow"] == 5
    assert np.sum(np.abs(np.linalg.eigvals(model.F)) > 1) == 1
