import numpy as np
import pytest

from eqfree import krylov as kr
from eqfree import plant as pl


def _dense_jacobian(stepper, u, eps=None):
    return np.column_stack([kr.jvp(stepper, u, e, eps=eps) for e in np.eye(u.size)])


# -- jvp ------------------------------------------------------------------------


def test_jvp_linear_map(rng):
    A = rng.standard_normal((20, 20))
    u, v = rng.standard_normal(20), rng.standard_normal(20)
    out = kr.jvp(lambda x: A @ x, u, v)
    np.testing.assert_allclose(out, A @ v, rtol=1e-7, atol=1e-7 * np.linalg.norm(A @ v))


def test_jvp_scales_with_direction(cfg, fd_fixed_point, rng):
    v = rng.standard_normal(51)
    S = lambda u: pl.fd_timestepper(u, cfg)
    a = kr.jvp(S, fd_fixed_point, v)
    b = kr.jvp(S, fd_fixed_point, 2 * v)
    np.testing.assert_allclose(b, 2 * a, rtol=1e-9)


def test_jvp_rejects_zero_direction():
    with pytest.raises(ValueError):
        kr.jvp(lambda x: x, np.ones(3), np.zeros(3))


def test_jvp_non_finite_reported():
    with pytest.raises(kr.SolverError), np.errstate(divide="ignore"):
        kr.jvp(lambda x: x / 0.0 if np.any(x > 1) else x, np.ones(3), np.ones(3))


def test_fd_jvp_matches_dense_assembly(cfg, fd_fixed_point, rng):
    S = lambda u: pl.fd_timestepper(u, cfg)
    J = _dense_jacobian(S, fd_fixed_point)
    J_op = kr.jacobian_operator(S, fd_fixed_point)
    for _ in range(5):
        v = rng.standard_normal(51)
        np.testing.assert_allclose(J_op.matvec(v), J @ v, rtol=0, atol=1e-6 * np.linalg.norm(J @ v))


def test_fd_jvp_eps_robust(cfg, fd_fixed_point, rng):
    S = lambda u: pl.fd_timestepper(u, cfg)
    v = rng.standard_normal(51)
    eps = kr.default_eps(fd_fixed_point)
    a, b = kr.jvp(S, fd_fixed_point, v, eps=eps), kr.jvp(S, fd_fixed_point, v, eps=eps / 2)
    assert np.linalg.norm(a - b) / np.linalg.norm(a) < 1e-5


# -- gmres ----------------------------------------------------------------------


def test_gmres_identity():
    b = np.arange(1.0, 6.0)
    rep = kr.gmres(np.eye(5), b)
    assert rep.converged and rep.iterations == 1
    np.testing.assert_allclose(rep.x, b, rtol=1e-14)


def test_gmres_diagonal():
    rep = kr.gmres(np.diag([2.0, 3.0]), np.array([2.0, 3.0]), tol=1e-12)
    assert rep.converged
    np.testing.assert_allclose(rep.x, [1.0, 1.0], rtol=1e-12)


def test_gmres_zero_rhs():
    rep = kr.gmres(np.eye(3), np.zeros(3))
    assert rep.converged and not np.any(rep.x)


@pytest.mark.parametrize("seed", range(50))
def test_gmres_random_systems(seed):
    rng = np.random.default_rng(seed)
    A = np.eye(30) * 6 + rng.standard_normal((30, 30))
    b = rng.standard_normal(30)
    rep = kr.gmres(A, b, tol=1e-12)
    exact = np.linalg.solve(A, b)
    assert rep.converged
    assert np.linalg.norm(rep.x - exact) / np.linalg.norm(exact) <= 1e-8
    assert np.linalg.norm(b - A @ rep.x) <= 1e-12 * np.linalg.norm(b) * 1.0001


def test_gmres_residual_history_monotone(rng):
    A = np.eye(40) * 10 + rng.standard_normal((40, 40))
    rep = kr.gmres(A, rng.standard_normal(40), tol=1e-11, restart=10, maxiter=400)
    h = np.array(rep.residual_history)
    # within each cycle of 10 the least-squares residual cannot grow
    for start in range(1, len(h), 10):
        cycle = h[start : start + 10]
        assert np.all(np.diff(cycle) <= 1e-12 * h[0])
    assert rep.converged and rep.restarts > 1


def test_gmres_stagnation_is_reported():
    # rotation: GMRES(1) makes no progress
    A = np.array([[0.0, 1.0], [-1.0, 0.0]])
    rep = kr.gmres(A, np.array([1.0, 0.0]), restart=1, maxiter=20)
    assert not rep.converged


def test_gmres_bad_arguments():
    with pytest.raises(ValueError):
        kr.gmres(np.eye(3), np.ones(4))
    with pytest.raises(ValueError):
        kr.gmres(np.eye(3), np.ones(3), tol=0)


def test_gmres_accepts_callable():
    rep = kr.gmres(lambda v: 4 * v, np.ones(6))
    np.testing.assert_allclose(rep.x, 0.25)


def test_gmres_csv(tmp_path):
    from eqfree.textio import read_csv

    rep = kr.gmres(np.diag([1.0, 2.0, 3.0]), np.ones(3))
    rep.to_csv(tmp_path / "g.csv")
    header, data = read_csv(tmp_path / "g.csv")
    assert header == ["iteration", "residual"]
    assert data.shape == (len(rep.residual_history), 2)


# -- newton-krylov ----------------------------------------------------------------


def test_newton_affine():
    rep = kr.newton_krylov_fixed_point(lambda u: u / 2 + 1, np.zeros(7))
    assert rep.converged and rep.iterations <= 2
    np.testing.assert_allclose(rep.u, 2.0, rtol=1e-12)


def test_newton_rejects_non_finite_guess():
    with pytest.raises(ValueError):
        kr.newton_krylov_fixed_point(lambda u: u, np.array([np.nan, 0.0]))


def test_newton_reports_failure():
    # u = u + 1 has no fixed point
    rep = kr.newton_krylov_fixed_point(lambda u: u + 1, np.zeros(3), max_newton=5)
    assert not rep.converged and rep.message


def test_newton_bratu(cfg, u_analytic):
    rep = kr.newton_krylov_fixed_point(lambda u: pl.fd_timestepper(u, cfg), 1.05 * u_analytic, tol_res=1e-12)
    assert rep.converged and rep.residual <= 1e-12
    assert np.abs(rep.u - u_analytic).max() <= 2e-3  # O(h^2) discretization gap
    # superlinear tail once below 1e-4
    r = np.array(rep.residual_history)
    tail = [(a, b) for a, b in zip(r[:-1], r[1:]) if 0 < a < 1e-4 and b > 1e-14]
    for a, b in tail:
        assert b <= 10 * a**1.5


# -- arnoldi ----------------------------------------------------------------------


def _check_arnoldi(A, res):
    Q, H = res.Q, res.H
    assert np.abs(Q.T @ Q - np.eye(Q.shape[1])).max() <= 1e-10
    assert kr.arnoldi_relation_error(A, res) <= 1e-8
    assert np.all(np.tril(H, -2) == 0)


def test_arnoldi_diagonal(rng):
    A = np.diag([5.0, 4.0, 3.0, 2.0, 1.0])
    res = kr.arnoldi(A, rng.standard_normal(5), 5)
    np.testing.assert_allclose(res.ritz_values.real, [5, 4, 3, 2, 1], atol=1e-10)
    assert np.all(res.ritz_values.imag == 0)
    _check_arnoldi(A, res)


@pytest.mark.parametrize("seed", range(10))
def test_arnoldi_dominant_eigenvalue(seed):
    rng = np.random.default_rng(seed)
    Qr, _ = np.linalg.qr(rng.standard_normal((50, 50)))
    A = Qr @ np.diag(np.concatenate([[10.0], rng.uniform(-1, 1, 49)])) @ Qr.T
    res = kr.arnoldi(A, rng.standard_normal(50), 8)
    assert abs(res.ritz_values[0] - 10) <= 1e-8
    assert np.all(np.diff(np.abs(res.ritz_values)) <= 1e-12)
    np.testing.assert_allclose(np.linalg.norm(res.ritz_vectors, axis=0), 1.0, rtol=1e-12)
    _check_arnoldi(A, res)


def test_arnoldi_breakdown_is_exact(rng):
    A = np.diag([3.0, 2.0, 1.0, 0.5])
    v0 = np.array([1.0, 1.0, 0.0, 0.0])  # lives in a 2-dimensional invariant subspace
    res = kr.arnoldi(A, v0, 4)
    assert res.exact and res.k == 2
    np.testing.assert_allclose(np.sort(res.ritz_values.real), [2.0, 3.0], atol=1e-12)
    assert np.all(res.ritz_residuals == 0)


def test_arnoldi_bad_arguments():
    with pytest.raises(ValueError):
        kr.arnoldi(np.eye(3), np.zeros(3), 2)
    with pytest.raises(ValueError):
        kr.arnoldi(np.eye(3), np.ones(3), 4)


def test_arnoldi_complex_pairs_adjacent(rng):
    A = np.zeros((6, 6))
    A[:2, :2] = [[0.9, -0.4], [0.4, 0.9]]
    A[2:, 2:] = np.diag([0.5, 0.3, 0.2, 0.1])
    res = kr.arnoldi(A, rng.standard_normal(6), 6)
    v = res.ritz_values
    assert v[0] == np.conj(v[1]) and v[0].imag > 0
    np.testing.assert_allclose(abs(v[0]), np.hypot(0.9, 0.4), atol=1e-10)


def test_bratu_spectrum_one_unstable_mode(cfg, fd_fixed_point, rng):
    J = kr.jacobian_operator(lambda u: pl.fd_timestepper(u, cfg), fd_fixed_point)
    res = kr.arnoldi(J, rng.standard_normal(51), 40)
    assert np.sum(np.abs(res.ritz_values) > 1) == 1
    assert abs(res.ritz_values[0].real - 1.0159717) < 1e-6
    assert kr.arnoldi_relation_error(J, res) <= 1e-8
